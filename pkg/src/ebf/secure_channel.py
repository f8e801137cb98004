"""Minimal authenticated record layer with a key-log side channel.

A pre-shared-secret handshake derives per-direction traffic keys; records
are sealed with an AEAD under a deterministic nonce (direction byte, three
zero bytes, 64-bit big-endian sequence number) and authenticated together
with ``session_id || direction || seq``.  Session keys and the cipher name
are exported to a key-log file so an interposer can decrypt, mutate, and
re-seal traffic.

Key-log format (UTF-8, one record per line, lowercase hex):

    EBF-KEYLOG v1
    CIPHER aead-v1
    SESSION <32 hex> CLIENT <64 hex> SERVER <64 hex>
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEYLOG_MAGIC = "EBF-KEYLOG v1"
MAX_SEQ = 2**64 - 1


class HandshakeError(ValueError):
    """Session establishment failed."""


class SeqOverflow(RuntimeError):
    """Sequence counter exhausted for this direction."""


class AuthFailure(ValueError):
    """Record failed authentication (tampered or wrong key)."""


class ReplayOrGap(ValueError):
    """Record authenticated but its sequence number is not the expected one."""


class KeyLogError(OSError):
    """Key-log file could not be written or is inconsistent."""


class MalformedLine(ValueError):
    """Key-log line does not match the grammar."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"key log line {line_no}: {reason}")
        self.line_no = line_no


class UnknownCipher(ValueError):
    """Key-log names a cipher this build does not register."""


@dataclass(frozen=True, slots=True)
class CipherSpec:
    name: str
    key_len: int
    nonce_len: int
    tag_len: int


AEAD_V1 = CipherSpec(name="aead-v1", key_len=32, nonce_len=12, tag_len=16)

CIPHERS = {AEAD_V1.name: AEAD_V1}


class Direction(Enum):
    CLIENT_TO_SERVER = 0x01
    SERVER_TO_CLIENT = 0x02


@dataclass(slots=True)
class SessionKeys:
    """Traffic keys plus per-direction sequence counters for one session.

    A SessionKeys value belongs to one endpoint; counters are not safe to
    share across concurrent users without external serialization.
    """

    session_id: bytes
    client_key: bytes
    server_key: bytes
    send_seq: dict[Direction, int] = field(default_factory=dict)
    recv_seq: dict[Direction, int] = field(default_factory=dict)
    _aeads: dict[Direction, ChaCha20Poly1305] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for direction in Direction:
            self.send_seq.setdefault(direction, 0)
            self.recv_seq.setdefault(direction, 0)

    def key_for(self, direction: Direction) -> bytes:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.client_key
        return self.server_key

    def aead_for(self, direction: Direction) -> ChaCha20Poly1305:
        aead = self._aeads.get(direction)
        if aead is None:
            aead = ChaCha20Poly1305(self.key_for(direction))
            self._aeads[direction] = aead
        return aead

    def fresh(self) -> "SessionKeys":
        """Same keys, counters reset; a new endpoint view of the session."""
        return SessionKeys(self.session_id, self.client_key, self.server_key)


@dataclass(frozen=True, slots=True)
class Record:
    """One sealed frame on the wire."""

    session_id: bytes
    direction: Direction
    seq: int
    nonce: bytes
    ciphertext: bytes

    def to_wire(self) -> bytes:
        return (
            self.session_id
            + bytes([self.direction.value])
            + self.seq.to_bytes(8, "big")
            + self.nonce
            + len(self.ciphertext).to_bytes(4, "big")
            + self.ciphertext
        )

    @classmethod
    def from_wire(cls, data: bytes) -> "Record":
        if len(data) < 16 + 1 + 8 + 12 + 4:
            raise ValueError("record truncated")
        direction = Direction(data[16])
        seq = int.from_bytes(data[17:25], "big")
        nonce = data[25:37]
        ct_len = int.from_bytes(data[37:41], "big")
        ciphertext = data[41 : 41 + ct_len]
        if len(ciphertext) != ct_len:
            raise ValueError("record ciphertext truncated")
        return cls(data[:16], direction, seq, nonce, ciphertext)


def _nonce(direction: Direction, seq: int) -> bytes:
    return bytes([direction.value, 0, 0, 0]) + seq.to_bytes(8, "big")


def _assoc_data(session_id: bytes, direction: Direction, seq: int) -> bytes:
    return session_id + bytes([direction.value]) + seq.to_bytes(8, "big")


def establish_session(
    pre_shared_secret: bytes, client_nonce: bytes, server_nonce: bytes
) -> SessionKeys:
    """Derive per-direction keys from the shared secret and both nonces.

    Deterministic: the same inputs always yield the same session, which is
    what lets every party (and the key log) agree on key material.
    """
    if not pre_shared_secret:
        raise HandshakeError("empty pre-shared secret")
    if len(client_nonce) != 16 or len(server_nonce) != 16:
        raise HandshakeError("nonces must be 16 bytes")
    salt = client_nonce + server_nonce
    session_id = hashlib.sha256(salt).digest()[:16]

    def derive(label: bytes) -> bytes:
        kdf = HKDF(algorithm=hashes.SHA256(), length=AEAD_V1.key_len, salt=salt, info=label)
        return kdf.derive(pre_shared_secret)

    return SessionKeys(
        session_id=session_id,
        client_key=derive(b"client traffic key"),
        server_key=derive(b"server traffic key"),
    )


def seal(keys: SessionKeys, direction: Direction, plaintext: bytes) -> Record:
    """Encrypt ``plaintext`` at the next sequence number for ``direction``."""
    seq = keys.send_seq[direction]
    if seq >= MAX_SEQ:
        raise SeqOverflow(f"send sequence exhausted for {direction.name}")
    record = seal_at(keys, direction, seq, plaintext)
    keys.send_seq[direction] = seq + 1
    return record


def seal_at(keys: SessionKeys, direction: Direction, seq: int, plaintext: bytes) -> Record:
    """Stateless seal at an explicit sequence number (interposer use)."""
    nonce = _nonce(direction, seq)
    ciphertext = keys.aead_for(direction).encrypt(
        nonce, plaintext, _assoc_data(keys.session_id, direction, seq)
    )
    return Record(keys.session_id, direction, seq, nonce, ciphertext)


def open_record(keys: SessionKeys, record: Record) -> bytes:
    """Authenticate and decrypt; enforces the in-order sequence contract."""
    plaintext = decrypt_record(keys, record)
    expected = keys.recv_seq[record.direction]
    if record.seq != expected:
        raise ReplayOrGap(f"seq {record.seq}, expected {expected}")
    keys.recv_seq[record.direction] = expected + 1
    return plaintext


def decrypt_record(keys: SessionKeys, record: Record) -> bytes:
    """Stateless authenticate-and-decrypt at the record's own sequence number."""
    if record.session_id != keys.session_id:
        raise AuthFailure("record belongs to a different session")
    try:
        return keys.aead_for(record.direction).decrypt(
            record.nonce,
            record.ciphertext,
            _assoc_data(record.session_id, record.direction, record.seq),
        )
    except InvalidTag as exc:
        raise AuthFailure("record failed authentication") from exc


@dataclass(frozen=True, slots=True)
class KeyLogEntry:
    session_id: bytes
    client_key: bytes
    server_key: bytes
    cipher_name: str

    def keys(self) -> SessionKeys:
        """Rebuild a SessionKeys view (fresh counters) from logged material."""
        return SessionKeys(self.session_id, self.client_key, self.server_key)


@dataclass(frozen=True, slots=True)
class KeyLog:
    entries: tuple[KeyLogEntry, ...] = ()
    _keys_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def find(self, session_id: bytes) -> KeyLogEntry | None:
        for entry in self.entries:
            if entry.session_id == session_id:
                return entry
        return None

    def keys_for(self, session_id: bytes) -> SessionKeys | None:
        """A cached SessionKeys view for the session, if logged."""
        keys = self._keys_cache.get(session_id)
        if keys is None:
            entry = self.find(session_id)
            if entry is None:
                return None
            keys = entry.keys()
            self._keys_cache[session_id] = keys
        return keys


def write_keylog_entry(log_path: str, keys: SessionKeys, spec: CipherSpec) -> None:
    """Append one session's keys, creating the header on first write.

    The write is flushed before returning; the campaign cannot proceed in
    key-aware mode without it, so failures are raised as ``KeyLogError``.
    """
    try:
        exists = os.path.exists(log_path) and os.path.getsize(log_path) > 0
        if exists:
            existing = parse_keylog(log_path)
            if existing.find(keys.session_id) is not None:
                raise KeyLogError(f"session {keys.session_id.hex()} already logged")
            if existing.entries and existing.entries[0].cipher_name != spec.name:
                raise KeyLogError("cipher differs from existing log")
        line = (
            f"SESSION {keys.session_id.hex()} "
            f"CLIENT {keys.client_key.hex()} SERVER {keys.server_key.hex()}\n"
        )
        with open(log_path, "a", encoding="utf-8") as fh:
            if not exists:
                fh.write(f"{KEYLOG_MAGIC}\n")
                fh.write(f"CIPHER {spec.name}\n")
            elif _needs_cipher_line(log_path):
                fh.write(f"CIPHER {spec.name}\n")
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
    except KeyLogError:
        raise
    except (OSError, MalformedLine, UnknownCipher) as exc:
        raise KeyLogError(f"cannot write key log {log_path}: {exc}") from exc


def _needs_cipher_line(log_path: str) -> bool:
    with open(log_path, "r", encoding="utf-8") as fh:
        return not any(line.startswith("CIPHER ") for line in fh)


def parse_keylog(log_path: str) -> KeyLog:
    """Read every session entry; malformed lines name their line number."""
    with open(log_path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != KEYLOG_MAGIC:
        raise MalformedLine(1, f"expected magic header {KEYLOG_MAGIC!r}")
    cipher_name: str | None = None
    entries: list[KeyLogEntry] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        parts = line.split(" ")
        if parts[0] == "CIPHER":
            if len(parts) != 2:
                raise MalformedLine(line_no, "CIPHER takes exactly one name")
            if cipher_name is not None:
                raise MalformedLine(line_no, "duplicate CIPHER line")
            if entries:
                raise MalformedLine(line_no, "CIPHER must precede SESSION lines")
            if parts[1] not in CIPHERS:
                raise UnknownCipher(parts[1])
            cipher_name = parts[1]
            continue
        if parts[0] == "SESSION":
            if cipher_name is None:
                raise MalformedLine(line_no, "SESSION before CIPHER")
            if len(parts) != 6 or parts[2] != "CLIENT" or parts[4] != "SERVER":
                raise MalformedLine(line_no, "expected SESSION <id> CLIENT <key> SERVER <key>")
            session_id = _hex_field(parts[1], 16, line_no, "session id")
            client_key = _hex_field(parts[3], 32, line_no, "client key")
            server_key = _hex_field(parts[5], 32, line_no, "server key")
            if any(entry.session_id == session_id for entry in entries):
                raise MalformedLine(line_no, "duplicate session id")
            entries.append(KeyLogEntry(session_id, client_key, server_key, cipher_name))
            continue
        raise MalformedLine(line_no, f"unrecognized line {parts[0]!r}")
    return KeyLog(entries=tuple(entries))


def _hex_field(text: str, expected_len: int, line_no: int, what: str) -> bytes:
    if len(text) != expected_len * 2 or text != text.lower():
        raise MalformedLine(line_no, f"{what} must be {expected_len * 2} lowercase hex chars")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise MalformedLine(line_no, f"{what} is not valid hex") from None


class KeyLogReader:
    """Incremental key-log follower for long-running sessions.

    Re-parsing a growing log from scratch is quadratic; this reader keeps a
    file offset and yields only entries appended since the last poll.
    """

    def __init__(self, log_path: str):
        self.log_path = log_path
        self._offset = 0
        self._line_no = 0
        self._cipher: str | None = None
        self._pending = ""

    def poll(self) -> list[KeyLogEntry]:
        try:
            with open(self.log_path, "r", encoding="utf-8") as fh:
                fh.seek(self._offset)
                chunk = fh.read()
                self._offset = fh.tell()
        except FileNotFoundError:
            return []
        text = self._pending + chunk
        lines = text.split("\n")
        self._pending = lines.pop()  # possibly incomplete tail
        entries: list[KeyLogEntry] = []
        for line in lines:
            self._line_no += 1
            if line == "":
                continue
            if self._line_no == 1:
                if line != KEYLOG_MAGIC:
                    raise MalformedLine(1, f"expected magic header {KEYLOG_MAGIC!r}")
                continue
            parts = line.split(" ")
            if parts[0] == "CIPHER":
                if len(parts) != 2 or parts[1] not in CIPHERS:
                    raise UnknownCipher(line)
                self._cipher = parts[1]
                continue
            if parts[0] == "SESSION":
                if self._cipher is None:
                    raise MalformedLine(self._line_no, "SESSION before CIPHER")
                if len(parts) != 6 or parts[2] != "CLIENT" or parts[4] != "SERVER":
                    raise MalformedLine(self._line_no, "bad SESSION line")
                entries.append(
                    KeyLogEntry(
                        _hex_field(parts[1], 16, self._line_no, "session id"),
                        _hex_field(parts[3], 32, self._line_no, "client key"),
                        _hex_field(parts[5], 32, self._line_no, "server key"),
                        self._cipher,
                    )
                )
                continue
            raise MalformedLine(self._line_no, f"unrecognized line {parts[0]!r}")
        return entries
