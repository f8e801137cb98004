"""Bit-exact encoder/decoder for a core subset of MQTT 3.1.1 control packets.

Supported packet types: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK,
SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT.  QoS 2, MQTT 5
properties, and CONNECT will/auth fields are out of scope.

Decoding never raises on hostile bytes: ``decode_packet`` returns either a
packet or a ``DecodeError`` value naming the failing field, so callers can
tell a graceful reject apart from a genuine anomaly.  The low-level varint
helpers do raise (``MalformedVarint``/``Incomplete``); ``decode_packet``
reifies those into error values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

MAX_REMAINING_LENGTH = 268_435_455
MAX_FRAME_LENGTH = 5 + MAX_REMAINING_LENGTH

#: Raw wire frame: fixed header byte + remaining-length varint + body.
RawFrame = bytes


class PacketType(IntEnum):
    """4-bit control packet type codes (fixed-header high nibble)."""

    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class RangeError(ValueError):
    """Value outside the encodable varint range."""


class MalformedVarint(ValueError):
    """Varint violates the 4-byte limit or minimality rule."""


class Incomplete(ValueError):
    """Input ended before the field could be read."""


class EncodeError(ValueError):
    """Packet violates its invariants and cannot be encoded."""


class DecodeErrorKind(Enum):
    UNSUPPORTED_TYPE = "unsupported_type"
    MALFORMED_VARINT = "malformed_varint"
    INCOMPLETE = "incomplete"
    BAD_UTF8 = "bad_utf8"
    LENGTH_MISMATCH = "length_mismatch"


@dataclass(frozen=True, slots=True)
class DecodeError:
    """Structured decode failure naming the field that could not be parsed.

    ``kind`` is the coarse class; ``field`` qualifies it with the packet
    context (e.g. ``connect.protocol_name``), so two failures of the same
    kind in different packets remain distinguishable.
    """

    kind: DecodeErrorKind
    field: str
    message: str = ""

    @property
    def outcome(self) -> str:
        """Canonical class label, used to compare decode behaviors."""
        return f"err:{self.kind.value}:{self.field}"


@dataclass(frozen=True, slots=True)
class Connect:
    protocol_name: str = "MQTT"
    keep_alive: int = 0
    client_id: str = ""


@dataclass(frozen=True, slots=True)
class Connack:
    session_present: bool = False
    return_code: int = 0


@dataclass(frozen=True, slots=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False
    retain: bool = False


@dataclass(frozen=True, slots=True)
class Puback:
    packet_id: int


@dataclass(frozen=True, slots=True)
class Subscribe:
    packet_id: int
    topic_filters: tuple[tuple[str, int], ...] = field(default=())


@dataclass(frozen=True, slots=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...] = field(default=())


@dataclass(frozen=True, slots=True)
class Pingreq:
    pass


@dataclass(frozen=True, slots=True)
class Pingresp:
    pass


@dataclass(frozen=True, slots=True)
class Disconnect:
    pass


Packet = (
    Connect
    | Connack
    | Publish
    | Puback
    | Subscribe
    | Suback
    | Pingreq
    | Pingresp
    | Disconnect
)

PACKET_TYPE_OF = {
    Connect: PacketType.CONNECT,
    Connack: PacketType.CONNACK,
    Publish: PacketType.PUBLISH,
    Puback: PacketType.PUBACK,
    Subscribe: PacketType.SUBSCRIBE,
    Suback: PacketType.SUBACK,
    Pingreq: PacketType.PINGREQ,
    Pingresp: PacketType.PINGRESP,
    Disconnect: PacketType.DISCONNECT,
}

_TYPE_NAMES = {t.value: t.name.lower() for t in PacketType}


def packet_outcome(result: Packet | DecodeError) -> str:
    """Class label for a decode result: packet type name or error class."""
    if isinstance(result, DecodeError):
        return result.outcome
    return PACKET_TYPE_OF[type(result)].name.lower()


def encode_remaining_length(n: int) -> bytes:
    """Encode ``n`` as the MQTT remaining-length varint (1-4 bytes).

    Base-128 little-endian, continuation bit 0x80 on every byte but the
    last; always the minimal encoding.
    """
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise RangeError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_remaining_length(data: bytes) -> tuple[int, int]:
    """Decode a remaining-length varint.

    Returns ``(value, bytes_consumed)``.  Rejects non-minimal encodings
    and anything needing a fifth byte.
    """
    if not data:
        raise Incomplete("remaining length: no bytes")
    value = 0
    shift = 1
    for i in range(4):
        if i >= len(data):
            raise Incomplete("remaining length: truncated varint")
        byte = data[i]
        value += (byte & 0x7F) * shift
        shift *= 128
        if not byte & 0x80:
            if i > 0 and byte == 0:
                raise MalformedVarint("non-minimal varint")
            return value, i + 1
    raise MalformedVarint("varint exceeds 4 bytes")


def _read_string(body: bytes, offset: int, fieldname: str) -> tuple[str, int] | DecodeError:
    """Parse a 2-byte-length-prefixed UTF-8 string from ``body``."""
    if offset + 2 > len(body):
        return DecodeError(DecodeErrorKind.INCOMPLETE, fieldname, "string length truncated")
    length = (body[offset] << 8) | body[offset + 1]
    end = offset + 2 + length
    if end > len(body):
        return DecodeError(DecodeErrorKind.INCOMPLETE, fieldname, "string data truncated")
    try:
        text = body[offset + 2 : end].decode("utf-8")
    except UnicodeDecodeError:
        return DecodeError(DecodeErrorKind.BAD_UTF8, fieldname, "invalid utf-8")
    return text, end


def decode_packet(frame: RawFrame) -> Packet | DecodeError:
    """Decode one complete wire frame; total on arbitrary byte strings."""
    if not frame:
        return DecodeError(DecodeErrorKind.INCOMPLETE, "fixed_header", "empty frame")
    first = frame[0]
    type_code = first >> 4
    name = _TYPE_NAMES.get(type_code)
    if name is None:
        return DecodeError(
            DecodeErrorKind.UNSUPPORTED_TYPE, "type", f"type code {type_code}"
        )
    flags = first & 0x0F

    if type_code == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos >= 2:
            return DecodeError(DecodeErrorKind.UNSUPPORTED_TYPE, "publish.qos", f"qos {qos}")
    elif type_code == PacketType.SUBSCRIBE:
        if flags != 0x02:
            return DecodeError(
                DecodeErrorKind.UNSUPPORTED_TYPE, "subscribe.flags", f"flags {flags:#x}"
            )
    elif flags != 0:
        return DecodeError(
            DecodeErrorKind.UNSUPPORTED_TYPE, f"{name}.flags", f"flags {flags:#x}"
        )

    rl_field = f"{name}.remaining_length"
    try:
        declared, varint_len = decode_remaining_length(frame[1:])
    except Incomplete as exc:
        return DecodeError(DecodeErrorKind.INCOMPLETE, rl_field, str(exc))
    except MalformedVarint as exc:
        return DecodeError(DecodeErrorKind.MALFORMED_VARINT, rl_field, str(exc))
    body = frame[1 + varint_len :]
    if len(body) != declared:
        return DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH,
            rl_field,
            f"declared {declared}, actual {len(body)}",
        )

    if type_code == PacketType.PINGREQ:
        return _expect_empty(body, Pingreq(), "pingreq")
    if type_code == PacketType.PINGRESP:
        return _expect_empty(body, Pingresp(), "pingresp")
    if type_code == PacketType.DISCONNECT:
        return _expect_empty(body, Disconnect(), "disconnect")
    if type_code == PacketType.PUBLISH:
        return _decode_publish(body, flags)
    if type_code == PacketType.CONNECT:
        return _decode_connect(body)
    if type_code == PacketType.CONNACK:
        return _decode_connack(body)
    if type_code == PacketType.PUBACK:
        return _decode_puback(body)
    if type_code == PacketType.SUBSCRIBE:
        return _decode_subscribe(body)
    return _decode_suback(body)


def _expect_empty(body: bytes, packet: Packet, name: str) -> Packet | DecodeError:
    if body:
        return DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH, f"{name}.extra", f"{len(body)} extra bytes"
        )
    return packet


def _decode_publish(body: bytes, flags: int) -> Packet | DecodeError:
    qos = (flags >> 1) & 0x03
    parsed = _read_string(body, 0, "publish.topic")
    if isinstance(parsed, DecodeError):
        return parsed
    topic, offset = parsed
    packet_id: int | None = None
    if qos == 1:
        if offset + 2 > len(body):
            return DecodeError(DecodeErrorKind.INCOMPLETE, "publish.packet_id", "truncated")
        packet_id = (body[offset] << 8) | body[offset + 1]
        if packet_id == 0:
            return DecodeError(
                DecodeErrorKind.UNSUPPORTED_TYPE, "publish.packet_id", "zero packet id"
            )
        offset += 2
    return Publish(
        topic=topic,
        payload=body[offset:],
        qos=qos,
        packet_id=packet_id,
        dup=bool(flags & 0x08),
        retain=bool(flags & 0x01),
    )


def _decode_connect(body: bytes) -> Packet | DecodeError:
    parsed = _read_string(body, 0, "connect.protocol_name")
    if isinstance(parsed, DecodeError):
        return parsed
    protocol_name, offset = parsed
    # Protocol level and connect-flags bytes are carried but not interpreted.
    if offset + 2 > len(body):
        return DecodeError(DecodeErrorKind.INCOMPLETE, "connect.header", "truncated")
    offset += 2
    if offset + 2 > len(body):
        return DecodeError(DecodeErrorKind.INCOMPLETE, "connect.keep_alive", "truncated")
    keep_alive = (body[offset] << 8) | body[offset + 1]
    offset += 2
    parsed = _read_string(body, offset, "connect.client_id")
    if isinstance(parsed, DecodeError):
        return parsed
    client_id, offset = parsed
    if offset != len(body):
        return DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH, "connect.extra", f"{len(body) - offset} extra bytes"
        )
    return Connect(protocol_name=protocol_name, keep_alive=keep_alive, client_id=client_id)


def _decode_connack(body: bytes) -> Packet | DecodeError:
    if len(body) < 2:
        return DecodeError(DecodeErrorKind.INCOMPLETE, "connack.header", "truncated")
    if len(body) > 2:
        return DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH, "connack.extra", f"{len(body) - 2} extra bytes"
        )
    return Connack(session_present=bool(body[0] & 0x01), return_code=body[1])


def _decode_puback(body: bytes) -> Packet | DecodeError:
    if len(body) < 2:
        return DecodeError(DecodeErrorKind.INCOMPLETE, "puback.packet_id", "truncated")
    if len(body) > 2:
        return DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH, "puback.extra", f"{len(body) - 2} extra bytes"
        )
    return Puback(packet_id=(body[0] << 8) | body[1])


def _decode_subscribe(body: bytes) -> Packet | DecodeError:
    if len(body) < 2:
        return DecodeError(DecodeErrorKind.INCOMPLETE, "subscribe.packet_id", "truncated")
    packet_id = (body[0] << 8) | body[1]
    offset = 2
    filters: list[tuple[str, int]] = []
    if offset == len(body):
        return DecodeError(
            DecodeErrorKind.INCOMPLETE, "subscribe.topic_filters", "no topic filters"
        )
    while offset < len(body):
        parsed = _read_string(body, offset, "subscribe.topic_filter")
        if isinstance(parsed, DecodeError):
            return parsed
        topic_filter, offset = parsed
        if offset >= len(body):
            return DecodeError(DecodeErrorKind.INCOMPLETE, "subscribe.qos", "truncated")
        qos = body[offset]
        offset += 1
        if qos >= 2:
            return DecodeError(DecodeErrorKind.UNSUPPORTED_TYPE, "subscribe.qos", f"qos {qos}")
        filters.append((topic_filter, qos))
    return Subscribe(packet_id=packet_id, topic_filters=tuple(filters))


def _decode_suback(body: bytes) -> Packet | DecodeError:
    if len(body) < 2:
        return DecodeError(DecodeErrorKind.INCOMPLETE, "suback.packet_id", "truncated")
    return Suback(packet_id=(body[0] << 8) | body[1], return_codes=tuple(body[2:]))


def _encode_string(text: str, fieldname: str) -> bytes:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise EncodeError(f"{fieldname} exceeds 65535 bytes")
    return len(data).to_bytes(2, "big") + data


def _frame(type_code: int, flags: int, body: bytes) -> bytes:
    return bytes([(type_code << 4) | flags]) + encode_remaining_length(len(body)) + body


def encode_packet(packet: Packet) -> RawFrame:
    """Encode a packet to its wire frame; inverse of ``decode_packet``."""
    if isinstance(packet, Pingreq):
        return b"\xc0\x00"
    if isinstance(packet, Pingresp):
        return b"\xd0\x00"
    if isinstance(packet, Disconnect):
        return b"\xe0\x00"
    if isinstance(packet, Connack):
        if not 0 <= packet.return_code <= 255:
            raise EncodeError("connack return code out of range")
        return _frame(
            PacketType.CONNACK, 0, bytes([int(packet.session_present), packet.return_code])
        )
    if isinstance(packet, Puback):
        _check_u16(packet.packet_id, "puback packet id")
        return _frame(PacketType.PUBACK, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Suback):
        _check_u16(packet.packet_id, "suback packet id")
        for code in packet.return_codes:
            if not 0 <= code <= 255:
                raise EncodeError(f"suback return code {code} out of range")
        return _frame(
            PacketType.SUBACK,
            0,
            packet.packet_id.to_bytes(2, "big") + bytes(packet.return_codes),
        )
    if isinstance(packet, Connect):
        _check_u16(packet.keep_alive, "keep alive")
        body = (
            _encode_string(packet.protocol_name, "protocol name")
            + b"\x04\x02"
            + packet.keep_alive.to_bytes(2, "big")
            + _encode_string(packet.client_id, "client id")
        )
        return _frame(PacketType.CONNECT, 0, body)
    if isinstance(packet, Publish):
        if packet.qos not in (0, 1):
            raise EncodeError(f"qos {packet.qos} not in subset")
        if packet.qos == 0 and packet.packet_id is not None:
            raise EncodeError("qos 0 publish must not carry a packet id")
        if packet.qos == 1 and not packet.packet_id:
            raise EncodeError("qos 1 publish needs a nonzero packet id")
        flags = (packet.dup << 3) | (packet.qos << 1) | int(packet.retain)
        body = _encode_string(packet.topic, "topic")
        if packet.qos == 1:
            assert packet.packet_id is not None
            _check_u16(packet.packet_id, "publish packet id")
            body += packet.packet_id.to_bytes(2, "big")
        body += packet.payload
        return _frame(PacketType.PUBLISH, flags, body)
    if isinstance(packet, Subscribe):
        _check_u16(packet.packet_id, "subscribe packet id")
        if not packet.topic_filters:
            raise EncodeError("subscribe needs at least one topic filter")
        body = packet.packet_id.to_bytes(2, "big")
        for topic_filter, qos in packet.topic_filters:
            if qos not in (0, 1):
                raise EncodeError(f"subscription qos {qos} not in subset")
            body += _encode_string(topic_filter, "topic filter") + bytes([qos])
        return _frame(PacketType.SUBSCRIBE, 0x02, body)
    raise EncodeError(f"cannot encode {type(packet).__name__}")


def _check_u16(value: int, what: str) -> None:
    if not 0 <= value <= 0xFFFF:
        raise EncodeError(f"{what} out of range")
