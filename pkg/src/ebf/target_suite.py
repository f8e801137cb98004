"""Reference MQTT publisher/broker pair with seeded, switchable bugs.

The broker is the system under test for both phases.  Its packet handling
is instrumented two ways:

* probe points (one unique id per branch arm) feed the fuzzer's coverage
  map and the crash traces;
* :func:`export_parser_model` exposes the same decode-and-dispatch logic as
  an instrumented decision program the bounded engine can explore
  symbolically, together with a ground-truth replay callback used to
  confirm counterexamples.

Anomalies never kill the harness: assertion- and abort-like events are
trapped and reified as :class:`Verdict` values.  A subprocess session mode
exists for realism (abnormal exit detection) but is off by default.
"""

from __future__ import annotations

import multiprocessing
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import Enum

from . import mqtt_codec as mc
from . import secure_channel as sc
from .bmc_engine import ABSENT, FindingKind, ParserProgram, Tape


class Bug(Enum):
    V1_ABSENT_HANDLE_RELEASE = "V1"
    V2_INDEX_OUT_OF_BOUNDS = "V2"
    V3_RESOURCE_LEAK = "V3"
    V4_DEEP_STATEFUL = "V4"


ALL_BUGS = frozenset(Bug)

TOPIC_BUFFER_CAPACITY = 256


@dataclass(frozen=True, slots=True)
class TargetConfig:
    enabled_bugs: frozenset[Bug] = frozenset()
    hang_threshold_ms: float = 500.0
    max_clients: int = 4

    def __post_init__(self) -> None:
        if self.hang_threshold_ms <= 0:
            raise ValueError("hang threshold must be positive")
        if self.max_clients < 1:
            raise ValueError("max_clients must be at least 1")


class Phase(Enum):
    FRESH = "fresh"
    CONNECTED = "connected"
    SUBSCRIBED = "subscribed"


class VerdictKind(Enum):
    OK = "ok"
    GRACEFUL_REJECT = "graceful_reject"
    CRASH = "crash"
    HANG = "hang"
    LEAK_DETECTED = "leak_detected"
    PROTOCOL_VIOLATION = "protocol_violation"


ANOMALY_KINDS = frozenset(
    (
        VerdictKind.CRASH,
        VerdictKind.HANG,
        VerdictKind.LEAK_DETECTED,
        VerdictKind.PROTOCOL_VIOLATION,
    )
)


@dataclass(frozen=True, slots=True)
class Verdict:
    kind: VerdictKind
    detail: str = ""
    crash_kind: FindingKind | None = None
    probe_trace: tuple[str, ...] = ()
    leak_site: str = ""
    leak_net: int = 0

    @property
    def is_anomaly(self) -> bool:
        return self.kind in ANOMALY_KINDS

    @classmethod
    def ok(cls) -> "Verdict":
        return _OK

    @classmethod
    def reject(cls, detail: str) -> "Verdict":
        return cls(VerdictKind.GRACEFUL_REJECT, detail=detail)

    @classmethod
    def crash(cls, kind: FindingKind, detail: str, trace: tuple[str, ...]) -> "Verdict":
        return cls(VerdictKind.CRASH, detail=detail, crash_kind=kind, probe_trace=trace)

    @classmethod
    def hang(cls, elapsed_ms: float) -> "Verdict":
        return cls(VerdictKind.HANG, detail=f"handler took {elapsed_ms:.0f} ms")

    @classmethod
    def leak(cls, site: str, net: int) -> "Verdict":
        return cls(
            VerdictKind.LEAK_DETECTED,
            detail=f"{site}: net {net}",
            leak_site=site,
            leak_net=net,
        )


_OK = Verdict(VerdictKind.OK)


@dataclass(slots=True)
class AllocLedger:
    acquired: int = 0
    released: int = 0
    by_site: dict[str, int] = field(default_factory=dict)

    def acquire(self, site: str) -> None:
        self.acquired += 1
        self.by_site[site] = self.by_site.get(site, 0) + 1

    def release(self, site: str) -> None:
        self.released += 1
        self.by_site[site] = self.by_site.get(site, 0) - 1

    def imbalance(self) -> dict[str, int]:
        return {site: net for site, net in self.by_site.items() if net != 0}

    def copy(self) -> "AllocLedger":
        return AllocLedger(self.acquired, self.released, dict(self.by_site))


def topic_matches(topic_filter: str, topic: str) -> bool:
    """MQTT wildcard match: ``+`` is one level, ``#`` a (possibly empty) tail."""
    filter_parts = topic_filter.split("/")
    topic_parts = topic.split("/")
    for i, part in enumerate(filter_parts):
        if part == "#":
            return True
        if i >= len(topic_parts):
            return False
        if part == "+":
            continue
        if part != topic_parts[i]:
            return False
    return len(topic_parts) == len(filter_parts)


_PROBE_IDS: dict[str, int] = {}


def probe_id(name: str) -> int:
    pid = _PROBE_IDS.get(name)
    if pid is None:
        pid = zlib.crc32(name.encode()) & 0xFFFF
        _PROBE_IDS[name] = pid
    return pid


@dataclass(slots=True)
class BrokerSnapshot:
    phase: Phase
    subscriptions: tuple[tuple[str, int], ...]
    last_message_handle: str | None
    session_live: bool
    ledger: AllocLedger
    client_id: str


class Broker:
    """One client session's broker-side state machine."""

    __slots__ = (
        "config",
        "probe_sink",
        "phase",
        "subscriptions",
        "last_message_handle",
        "retained",
        "ledger",
        "client_id",
        "_session_live",
        "_crashed",
        "trace",
    )

    def __init__(self, config: TargetConfig, probe_sink=None):
        self.config = config
        self.probe_sink = probe_sink
        self.phase = Phase.FRESH
        self.subscriptions: list[tuple[str, int]] = []
        self.last_message_handle: str | None = None
        self.retained: dict[str, bytes] = {}
        self.ledger = AllocLedger()
        self.client_id = ""
        self._session_live = False
        self._crashed = False
        self.trace: list[str] = []

    # -- memoized prefix support -------------------------------------------

    def snapshot(self) -> BrokerSnapshot:
        return BrokerSnapshot(
            phase=self.phase,
            subscriptions=tuple(self.subscriptions),
            last_message_handle=self.last_message_handle,
            session_live=self._session_live,
            ledger=self.ledger.copy(),
            client_id=self.client_id,
        )

    def restore(self, snap: BrokerSnapshot) -> None:
        self.phase = snap.phase
        self.subscriptions = list(snap.subscriptions)
        self.last_message_handle = snap.last_message_handle
        self._session_live = snap.session_live
        self.ledger = snap.ledger.copy()
        self.client_id = snap.client_id
        self.retained = {}
        self._crashed = False

    # -- instrumentation ------------------------------------------------------

    def _probe(self, name: str) -> None:
        self.trace.append(name)
        sink = self.probe_sink
        if sink is not None:
            sink.visit(probe_id(name))

    def _crash(self, kind: FindingKind, detail: str) -> tuple[None, Verdict]:
        self._crashed = True
        return None, Verdict.crash(kind, detail, tuple(self.trace))

    # -- the system under test ------------------------------------------------

    def handle_frame(self, frame: bytes) -> tuple[bytes | None, Verdict]:
        """Process one wire frame; never raises on hostile bytes."""
        self.trace = []
        self._probe("entry")
        bugs = self.config.enabled_bugs

        # V2: the publish path sizes its topic copy from the declared topic
        # length field without checking the 256-byte buffer, before the frame
        # length is cross-validated.
        if Bug.V2_INDEX_OUT_OF_BOUNDS in bugs and frame and frame[0] >> 4 == 3:
            if (frame[0] >> 1) & 0x03 < 2:
                verdict = self._v2_topic_copy(frame)
                if verdict is not None:
                    return verdict

        result = mc.decode_packet(frame)
        if isinstance(result, mc.DecodeError):
            self._probe(f"reject:{result.outcome}")
            return None, Verdict.reject(result.outcome)

        if isinstance(result, mc.Connect):
            return self._on_connect(result)
        if isinstance(result, mc.Publish):
            return self._on_publish(result)
        if isinstance(result, mc.Subscribe):
            return self._on_subscribe(result)
        if isinstance(result, mc.Pingreq):
            self._probe("pingreq")
            return mc.encode_packet(mc.Pingresp()), Verdict.ok()
        if isinstance(result, mc.Disconnect):
            return self._on_disconnect()
        name = mc.PACKET_TYPE_OF[type(result)].name.lower()
        self._probe(f"{name}:wrong_direction")
        return None, Verdict.reject(f"unexpected_{name}")

    def _v2_topic_copy(self, frame: bytes) -> tuple[None, Verdict] | None:
        try:
            _, vlen = mc.decode_remaining_length(frame[1:])
        except ValueError:
            return None
        at = 1 + vlen
        if at >= len(frame):
            return None
        hi = frame[at]
        lo = frame[at + 1] if at + 1 < len(frame) else None
        if hi >= 2 or (hi == 1 and lo is not None and lo >= 1):
            declared = (hi << 8) | (lo or 0)
            self._probe("publish:v2_overflow")
            return self._crash(
                FindingKind.INDEX_OUT_OF_BOUNDS,
                f"topic copy of {declared} bytes into {TOPIC_BUFFER_CAPACITY}-byte buffer",
            )
        return None

    def _on_connect(self, packet: mc.Connect) -> tuple[bytes | None, Verdict]:
        if self.phase is not Phase.FRESH:
            self._probe("connect:already_connected")
            return None, Verdict.reject("already_connected")
        self.ledger.acquire("session")
        if packet.protocol_name != "MQTT":
            self._probe("connect:bad_name")
            if Bug.V3_RESOURCE_LEAK not in self.config.enabled_bugs:
                self.ledger.release("session")
            # With V3 the freshly acquired session record is dropped
            # untracked: nothing will ever release it.
            return (
                mc.encode_packet(mc.Connack(session_present=False, return_code=1)),
                Verdict.reject("bad_protocol_name"),
            )
        self._probe("connect:ok")
        self._session_live = True
        self.phase = Phase.CONNECTED
        self.client_id = packet.client_id
        return (
            mc.encode_packet(mc.Connack(session_present=False, return_code=0)),
            Verdict.ok(),
        )

    def _on_publish(self, packet: mc.Publish) -> tuple[bytes | None, Verdict]:
        if self.phase is Phase.FRESH:
            self._probe("publish:not_connected")
            return None, Verdict.reject("not_connected")
        self._probe(f"publish:qos{packet.qos}")
        if packet.retain:
            self._probe("publish:retain")
            self.retained[packet.topic] = packet.payload
        if packet.dup:
            self._probe("publish:dup")
        if self.last_message_handle is not None:
            self._probe("publish:replace_handle")
            self.ledger.release("message")
        self.ledger.acquire("message")
        self.last_message_handle = packet.topic
        if self.phase is Phase.SUBSCRIBED:
            if any(topic_matches(f, packet.topic) for f, _ in self.subscriptions):
                self._probe("publish:deliver")
                if (
                    Bug.V4_DEEP_STATEFUL in self.config.enabled_bugs
                    and packet.qos == 1
                    and packet.dup
                    and packet.retain
                ):
                    self._probe("publish:v4_assert")
                    return self._crash(
                        FindingKind.ASSERTION_VIOLATION,
                        "retained duplicate delivery on subscribed session",
                    )
            else:
                self._probe("publish:no_match")
        if packet.qos == 1:
            assert packet.packet_id is not None
            return mc.encode_packet(mc.Puback(packet.packet_id)), Verdict.ok()
        return None, Verdict.ok()

    def _on_subscribe(self, packet: mc.Subscribe) -> tuple[bytes | None, Verdict]:
        if self.phase is Phase.FRESH:
            self._probe("subscribe:not_connected")
            return None, Verdict.reject("not_connected")
        granted = []
        for topic_filter, qos in packet.topic_filters:
            self._probe("subscribe:add")
            self.subscriptions.append((topic_filter, qos))
            granted.append(qos)
        self.phase = Phase.SUBSCRIBED
        self._probe("subscribe:ok")
        return (
            mc.encode_packet(mc.Suback(packet.packet_id, tuple(granted))),
            Verdict.ok(),
        )

    def _on_disconnect(self) -> tuple[bytes | None, Verdict]:
        self._probe("disconnect")
        if Bug.V1_ABSENT_HANDLE_RELEASE in self.config.enabled_bugs:
            # Release path guarded by nothing: frees the message handle
            # without checking that one is live.
            self._probe("disconnect:release_message")
            if self.last_message_handle is None:
                return self._crash(
                    FindingKind.ABSENT_HANDLE_RELEASE,
                    "release of absent message handle",
                )
            self.ledger.release("message")
            self.last_message_handle = None
        elif self.last_message_handle is not None:
            self._probe("disconnect:release_message")
            self.ledger.release("message")
            self.last_message_handle = None
        else:
            self._probe("disconnect:no_message")
        if self._session_live:
            self._probe("disconnect:end_session")
            self.ledger.release("session")
            self._session_live = False
        self.subscriptions.clear()
        self.phase = Phase.FRESH
        return mc.encode_packet(mc.Disconnect()), Verdict.ok()

    def finish(self) -> Verdict:
        """Session teardown: free tracked state, then audit the ledger."""
        if self._crashed:
            return Verdict.ok()
        if self.last_message_handle is not None:
            self.ledger.release("message")
            self.last_message_handle = None
        if self._session_live:
            self.ledger.release("session")
            self._session_live = False
        leaks = self.ledger.imbalance()
        if leaks:
            site, net = sorted(leaks.items())[0]
            return Verdict.leak(site, net)
        return Verdict.ok()


def behavior_label(config: TargetConfig, frame: bytes) -> str:
    """Canonical one-frame-from-fresh behavior class, for differential tests."""
    broker = Broker(config)
    response, verdict = broker.handle_frame(frame)
    if verdict.kind is VerdictKind.CRASH:
        assert verdict.crash_kind is not None
        return f"crash:{verdict.crash_kind.value}"
    if verdict.kind is VerdictKind.GRACEFUL_REJECT:
        return f"reject:{verdict.detail}"
    resp = "none"
    if response is not None:
        decoded = mc.decode_packet(response)
        assert not isinstance(decoded, mc.DecodeError)
        resp = mc.packet_outcome(decoded)
    return f"ok:{resp}"


def expected_response_type(
    packet: mc.Packet | mc.DecodeError, phase: Phase
) -> type | None:
    """Protocol response rules for a clean (bug-free) broker."""
    if isinstance(packet, mc.DecodeError):
        return None
    if isinstance(packet, mc.Connect):
        return mc.Connack if phase is Phase.FRESH else None
    if isinstance(packet, mc.Publish):
        if phase is Phase.FRESH or packet.qos == 0:
            return None
        return mc.Puback
    if isinstance(packet, mc.Subscribe):
        return mc.Suback if phase is not Phase.FRESH else None
    if isinstance(packet, mc.Pingreq):
        return mc.Pingresp
    if isinstance(packet, mc.Disconnect):
        return mc.Disconnect
    return None


# ---------------------------------------------------------------------------
# The instrumented decision-program twin of handle_frame (from the fresh
# state), interpreted by the bounded engine.  Decode checks appear in exactly
# the order decode_packet performs them; the differential tests in
# tests/test_target_suite.py hold the two implementations together.
# ---------------------------------------------------------------------------

_ASCII = frozenset(range(0x80))
_CONT = frozenset(range(0x80, 0xC0))
_LEAD2 = frozenset(range(0xC2, 0xE0))
_LEAD3 = frozenset((0xE1, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xEB, 0xEC, 0xEE, 0xEF))
_LEAD4 = frozenset((0xF1, 0xF2, 0xF3))
_A0_BF = frozenset(range(0xA0, 0xC0))
_80_9F = frozenset(range(0x80, 0xA0))
_90_BF = frozenset(range(0x90, 0xC0))
_80_8F = frozenset(range(0x80, 0x90))

_E0, _ED, _F0, _F4 = 0xE0, 0xED, 0xF0, 0xF4


def _build_b0_arms() -> list[tuple[str, frozenset[int]]]:
    arms: list[tuple[str, frozenset[int]]] = []
    fixed_flag_types = [
        ("connect", 1, (0,)),
        ("connack", 2, (0,)),
        ("puback", 4, (0,)),
        ("subscribe", 8, (2,)),
        ("suback", 9, (0,)),
        ("pingreq", 12, (0,)),
        ("pingresp", 13, (0,)),
        ("disconnect", 14, (0,)),
    ]
    for name, code, ok_flags in fixed_flag_types:
        arms.append((name, frozenset((code << 4) | f for f in ok_flags)))
        arms.append(
            (
                f"{name}_badflags",
                frozenset((code << 4) | f for f in range(16) if f not in ok_flags),
            )
        )
    arms.append(("publish", frozenset(0x30 | f for f in (0, 1, 2, 3, 8, 9, 0xA, 0xB))))
    arms.append(
        ("publish_badflags", frozenset(0x30 | f for f in (4, 5, 6, 7, 0xC, 0xD, 0xE, 0xF)))
    )
    return arms


# The codec extracts qos, dup and retain from byte 0; the model mirrors
# that extraction as one eight-way decision over the valid flag combos.
_PUBLISH_FLAG_ARMS = tuple(
    (
        f"q{qos}{'d' if dup else ''}{'r' if retain else ''}",
        frozenset((0x30 | (dup << 3) | (qos << 1) | retain,)),
    )
    for qos in (0, 1)
    for dup in (0, 1)
    for retain in (0, 1)
)


_B0_ARMS = _build_b0_arms()


def _model_string(
    tape: Tape, site: str, start: int, length: int, expect: bytes | None = None
) -> tuple[bool, bool]:
    """UTF-8 DFA over ``length`` bytes; returns (valid, equals expect)."""
    matched = expect is not None and length == len(expect)
    state = "init"
    for i in range(length):
        pos = start + i
        byte_site = f"{site}.c{i}"
        if state == "init":
            arms: list[tuple[str, frozenset[int]]] = []
            if matched and expect is not None and i < len(expect):
                arms.append(("match", frozenset((expect[i],))))
            arms.extend(
                [
                    ("ascii", _ASCII),
                    ("lead2", _LEAD2),
                    ("e0", frozenset((_E0,))),
                    ("lead3", _LEAD3),
                    ("ed", frozenset((_ED,))),
                    ("f0", frozenset((_F0,))),
                    ("lead4", _LEAD4),
                    ("f4", frozenset((_F4,))),
                ]
            )
            arm = tape.choose(byte_site, pos, arms, default="bad")
            if arm == "bad":
                return False, False
            if arm != "match":
                matched = False
            if arm in ("match", "ascii"):
                state = "init"
            elif arm == "lead2":
                state = "tail1"
            elif arm == "e0":
                state = "e0"
            elif arm == "lead3":
                state = "tail2"
            elif arm == "ed":
                state = "ed"
            elif arm == "f0":
                state = "f0"
            elif arm == "lead4":
                state = "tail3"
            else:
                state = "f4"
            continue
        tail_arms = {
            "tail1": ("fin", _CONT, "init"),
            "tail2": ("mid", _CONT, "tail1"),
            "tail3": ("mid", _CONT, "tail2"),
            "e0": ("mid", _A0_BF, "tail1"),
            "ed": ("mid", _80_9F, "tail1"),
            "f0": ("mid", _90_BF, "tail2"),
            "f4": ("mid", _80_8F, "tail2"),
        }
        label, values, next_state = tail_arms[state]
        arm = tape.choose(byte_site, pos, [(label, values)], default="bad")
        if arm == "bad":
            return False, False
        state = next_state
    if state != "init":
        return False, False
    return True, matched


def _model_run(tape: Tape, config: TargetConfig) -> str:
    bugs = config.enabled_bugs
    arm = tape.choose("byte0", 0, _B0_ARMS, default="bad_type")
    if arm == ABSENT:
        return "reject:err:incomplete:fixed_header"
    if arm == "bad_type":
        return "reject:err:unsupported_type:type"
    if arm.endswith("_badflags"):
        name = arm[: -len("_badflags")]
        f = "publish.qos" if name == "publish" else f"{name}.flags"
        return f"reject:err:unsupported_type:{f}"
    name = arm

    status, declared, nbytes = tape.bind_varint(f"{name}.rl", 1)
    base = 1 + nbytes
    rl_field = f"{name}.remaining_length"

    if (
        name == "publish"
        and Bug.V2_INDEX_OUT_OF_BOUNDS in bugs
        and status in ("eq", "short", "long")
    ):
        crash = _model_v2_peek(tape, base)
        if crash is not None:
            return crash

    if status in (ABSENT, "trunc"):
        return f"reject:err:incomplete:{rl_field}"
    if status in ("min", "over"):
        return f"reject:err:malformed_varint:{rl_field}"
    if status in ("short", "long"):
        return f"reject:err:length_mismatch:{rl_field}"

    if name == "pingreq":
        if declared:
            return "reject:err:length_mismatch:pingreq.extra"
        tape.effect("note", "dispatch pingreq")
        return "ok:pingresp"
    if name == "pingresp":
        if declared:
            return "reject:err:length_mismatch:pingresp.extra"
        return "reject:unexpected_pingresp"
    if name == "disconnect":
        if declared:
            return "reject:err:length_mismatch:disconnect.extra"
        return _model_disconnect(tape, bugs)
    if name == "connack":
        if declared < 2:
            return "reject:err:incomplete:connack.header"
        if declared > 2:
            return "reject:err:length_mismatch:connack.extra"
        return "reject:unexpected_connack"
    if name == "puback":
        if declared < 2:
            return "reject:err:incomplete:puback.packet_id"
        if declared > 2:
            return "reject:err:length_mismatch:puback.extra"
        return "reject:unexpected_puback"
    if name == "suback":
        if declared < 2:
            return "reject:err:incomplete:suback.packet_id"
        return "reject:unexpected_suback"
    if name == "connect":
        return _model_connect(tape, bugs, base, declared)
    if name == "publish":
        return _model_publish(tape, base, declared)
    return _model_subscribe(tape, base, declared)


def _model_v2_peek(tape: Tape, base: int) -> str | None:
    hi = tape.choose(
        "v2.topic_hi", base, [("zero", frozenset((0,))), ("one", frozenset((1,)))], "big"
    )
    overflow = hi == "big"
    if hi == "one":
        lo = tape.choose("v2.topic_lo", base + 1, [("zero", frozenset((0,)))], "pos")
        overflow = lo == "pos"
    if overflow:
        tape.effect("note", "publish: copy topic by declared length field")
        tape.effect("bounds_copy", "declared topic length exceeds 256-byte buffer")
        return "crash:index_out_of_bounds"
    return None


def _model_disconnect(tape: Tape, bugs: frozenset[Bug]) -> str:
    tape.effect("note", "dispatch disconnect")
    if Bug.V1_ABSENT_HANDLE_RELEASE in bugs:
        tape.effect("note", "disconnect: unguarded message release")
        tape.effect("release_handle", ABSENT)
        return "crash:absent_handle_release"
    tape.effect("note", "disconnect: no message handle, release skipped")
    return "ok:disconnect"


def _model_connect(tape: Tape, bugs: frozenset[Bug], base: int, declared: int) -> str:
    if declared < 2:
        return "reject:err:incomplete:connect.protocol_name"
    status, name_len = tape.bind_u16("connect.name_len", base, declared - 2)
    if status != "fit":
        return "reject:err:incomplete:connect.protocol_name"
    valid, is_mqtt = _model_string(tape, "connect.name", base + 2, name_len, b"MQTT")
    if not valid:
        return "reject:err:bad_utf8:connect.protocol_name"
    consumed = 2 + name_len
    if consumed + 2 > declared:
        return "reject:err:incomplete:connect.header"
    consumed += 2
    if consumed + 2 > declared:
        return "reject:err:incomplete:connect.keep_alive"
    consumed += 2
    if consumed + 2 > declared:
        return "reject:err:incomplete:connect.client_id"
    status, cid_len = tape.bind_u16(
        "connect.cid_len", base + consumed, declared - consumed - 2
    )
    if status != "fit":
        return "reject:err:incomplete:connect.client_id"
    valid, _ = _model_string(tape, "connect.cid", base + consumed + 2, cid_len)
    if not valid:
        return "reject:err:bad_utf8:connect.client_id"
    consumed += 2 + cid_len
    if consumed != declared:
        return "reject:err:length_mismatch:connect.extra"
    tape.effect("acquire", "session")
    if is_mqtt:
        tape.effect("note", "connect accepted")
        tape.effect("release", "session")
        return "ok:connack"
    tape.effect("note", "connect rejected: protocol name mismatch")
    if Bug.V3_RESOURCE_LEAK in bugs:
        tape.effect("note", "reject path skips session record release")
    else:
        tape.effect("release", "session")
    return "reject:bad_protocol_name"


def _model_publish(tape: Tape, base: int, declared: int) -> str:
    if declared < 2:
        return "reject:err:incomplete:publish.topic"
    status, topic_len = tape.bind_u16("publish.topic_len", base, declared - 2)
    if status != "fit":
        return "reject:err:incomplete:publish.topic"
    valid, _ = _model_string(tape, "publish.topic", base + 2, topic_len)
    if not valid:
        return "reject:err:bad_utf8:publish.topic"
    consumed = 2 + topic_len
    # The flag bits of byte 0 are only consulted once the body is parsed.
    flags = tape.choose("publish.flags", 0, list(_PUBLISH_FLAG_ARMS))
    if flags.startswith("q1"):
        if consumed + 2 > declared:
            return "reject:err:incomplete:publish.packet_id"
        hi = tape.choose(
            "publish.pid_hi", base + consumed, [("zero", frozenset((0,)))], "nz"
        )
        if hi == "zero":
            lo = tape.choose(
                "publish.pid_lo", base + consumed + 1, [("zero", frozenset((0,)))], "nz"
            )
            if lo == "zero":
                return "reject:err:unsupported_type:publish.packet_id"
        consumed += 2
    tape.effect("note", "dispatch publish")
    return "reject:not_connected"


def _model_subscribe(tape: Tape, base: int, declared: int) -> str:
    if declared < 2:
        return "reject:err:incomplete:subscribe.packet_id"
    consumed = 2
    if consumed == declared:
        return "reject:err:incomplete:subscribe.topic_filters"
    index = 0
    while consumed < declared:
        if declared - consumed < 2:
            return "reject:err:incomplete:subscribe.topic_filter"
        status, flt_len = tape.bind_u16(
            f"subscribe.f{index}.len", base + consumed, declared - consumed - 2
        )
        if status != "fit":
            return "reject:err:incomplete:subscribe.topic_filter"
        valid, _ = _model_string(tape, f"subscribe.f{index}", base + consumed + 2, flt_len)
        if not valid:
            return "reject:err:bad_utf8:subscribe.topic_filter"
        consumed += 2 + flt_len
        if consumed >= declared:
            return "reject:err:incomplete:subscribe.qos"
        arm = tape.choose(
            f"subscribe.f{index}.qos",
            base + consumed,
            [("ok", frozenset((0, 1)))],
            "bad",
        )
        if arm == "bad":
            return "reject:err:unsupported_type:subscribe.qos"
        consumed += 1
        index += 1
    tape.effect("note", "dispatch subscribe")
    return "reject:not_connected"


def export_parser_model(config: TargetConfig) -> ParserProgram:
    """The broker's decode-and-dispatch logic as an explorable program.

    The program mirrors one-frame handling from the fresh state plus session
    teardown, so its allocation events balance exactly when the real broker's
    ledger does.  ``concrete_check`` replays a frame through the real broker
    and reports the anomaly kind it reproduces, if any.
    """

    def run(tape: Tape) -> str:
        return _model_run(tape, config)

    def concrete_check(frame: bytes) -> str | None:
        broker = Broker(config)
        _, verdict = broker.handle_frame(frame)
        if verdict.kind is VerdictKind.CRASH:
            assert verdict.crash_kind is not None
            return verdict.crash_kind.value
        teardown = broker.finish()
        if teardown.kind is VerdictKind.LEAK_DETECTED:
            return FindingKind.RESOURCE_LEAK.value
        return None

    return ParserProgram(name="refbroker", run=run, concrete_check=concrete_check)


# ---------------------------------------------------------------------------
# Scripted sessions over the secure channel.
# ---------------------------------------------------------------------------

SESSION_SECRET = b"ebf-session-psk"


def session_nonces(seed: int) -> tuple[bytes, bytes]:
    import hashlib

    client = hashlib.sha256(b"client-nonce:%d" % seed).digest()[:16]
    server = hashlib.sha256(b"server-nonce:%d" % seed).digest()[:16]
    return client, server


def run_session(
    script: list[mc.Packet],
    config: TargetConfig,
    keylog_path: str | None = None,
    probe_sink=None,
    nonce_seed: int = 0,
    secret: bytes = SESSION_SECRET,
) -> tuple[list[tuple[str, bytes]], Verdict]:
    """Drive a packet script through an encrypted broker session.

    Returns the plaintext transcript (direction, frame) and the first
    anomaly verdict, or Ok.  Graceful rejects do not end the session.
    """
    if not script:
        raise ValueError("script must be non-empty")
    client_nonce, server_nonce = session_nonces(nonce_seed)
    client_keys = sc.establish_session(secret, client_nonce, server_nonce)
    server_keys = client_keys.fresh()
    if keylog_path is not None:
        sc.write_keylog_entry(keylog_path, server_keys, sc.AEAD_V1)
    broker = Broker(config, probe_sink)
    transcript: list[tuple[str, bytes]] = []
    outcome = Verdict.ok()
    for packet in script:
        frame = mc.encode_packet(packet)
        record = sc.seal(client_keys, sc.Direction.CLIENT_TO_SERVER, frame)
        delivered = sc.open_record(server_keys, record)
        transcript.append(("c2s", delivered))
        started = time.perf_counter()
        response, verdict = broker.handle_frame(delivered)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        if not verdict.is_anomaly and elapsed_ms > config.hang_threshold_ms:
            verdict = Verdict.hang(elapsed_ms)
        if response is not None:
            reply = sc.seal(server_keys, sc.Direction.SERVER_TO_CLIENT, response)
            transcript.append(("s2c", sc.open_record(client_keys, reply)))
        if verdict.is_anomaly:
            outcome = verdict
            break
    if not outcome.is_anomaly:
        teardown = broker.finish()
        if teardown.is_anomaly:
            outcome = teardown
    return transcript, outcome


def run_session_subprocess(
    script: list[mc.Packet], config: TargetConfig, nonce_seed: int = 0
) -> Verdict:
    """Session in a spawned process; anomalies become abnormal exits.

    Crash-class verdicts abort the child (SIGABRT), which is what the
    parent detects, mirroring how an uninstrumented target would die.
    """
    parent_conn, child_conn = multiprocessing.Pipe(duplex=False)
    proc = multiprocessing.Process(
        target=_subprocess_session_main, args=(child_conn, script, config, nonce_seed)
    )
    proc.start()
    proc.join(timeout=60)
    if proc.is_alive():
        proc.kill()
        proc.join()
        return Verdict.hang(60_000.0)
    detail = parent_conn.recv() if parent_conn.poll() else None
    if proc.exitcode is not None and proc.exitcode < 0:
        kind = FindingKind(detail["crash_kind"]) if detail else FindingKind.ASSERTION_VIOLATION
        return Verdict.crash(kind, detail["detail"] if detail else "abnormal exit", ())
    if detail is not None and detail.get("kind") == VerdictKind.LEAK_DETECTED.value:
        return Verdict.leak(detail["leak_site"], detail["leak_net"])
    return Verdict.ok()


def _subprocess_session_main(conn, script, config, nonce_seed) -> None:
    _, verdict = run_session(script, config, nonce_seed=nonce_seed)
    if verdict.kind is VerdictKind.CRASH:
        assert verdict.crash_kind is not None
        conn.send({"crash_kind": verdict.crash_kind.value, "detail": verdict.detail})
        conn.close()
        os.abort()
    if verdict.kind is VerdictKind.LEAK_DETECTED:
        conn.send(
            {
                "kind": verdict.kind.value,
                "leak_site": verdict.leak_site,
                "leak_net": verdict.leak_net,
            }
        )
    conn.close()


# ---------------------------------------------------------------------------
# Optional TCP transport: the broker on a localhost socket speaking
# length-prefixed sealed records, for cross-process runs.
# ---------------------------------------------------------------------------

_STATUS_CODES = {kind: i for i, kind in enumerate(VerdictKind)}
_STATUS_KINDS = {i: kind for kind, i in _STATUS_CODES.items()}


def _send_blob(sock: socket.socket, blob: bytes) -> None:
    sock.sendall(struct.pack(">I", len(blob)) + blob)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = b""
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            raise ConnectionError("peer closed")
        chunks += part
    return chunks


def _recv_blob(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


class TcpBrokerServer:
    """Serves broker sessions over localhost TCP; one session per connection."""

    def __init__(
        self,
        config: TargetConfig,
        keylog_path: str | None = None,
        secret: bytes = SESSION_SECRET,
        probe_sink=None,
    ):
        self.config = config
        self.keylog_path = keylog_path
        self.secret = secret
        self.probe_sink = probe_sink
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(config.max_clients)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._keylog_lock = threading.Lock()

    def __enter__(self) -> "TcpBrokerServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        try:
            poke = socket.create_connection(("127.0.0.1", self.port), timeout=1)
            poke.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._sock.close()

    def _accept_loop(self) -> None:
        gate = threading.Semaphore(self.config.max_clients)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            if self._stop.is_set():
                conn.close()
                return
            gate.acquire()
            threading.Thread(
                target=self._serve_one, args=(conn, gate), daemon=True
            ).start()

    def _serve_one(self, conn: socket.socket, gate: threading.Semaphore) -> None:
        try:
            with conn:
                client_nonce = _recv_exact(conn, 16)
                server_nonce = os.urandom(16)
                conn.sendall(server_nonce)
                keys = sc.establish_session(self.secret, client_nonce, server_nonce)
                if self.keylog_path is not None:
                    with self._keylog_lock:
                        sc.write_keylog_entry(self.keylog_path, keys, sc.AEAD_V1)
                broker = Broker(self.config, self.probe_sink)
                while True:
                    blob = _recv_blob(conn)
                    if not blob:
                        # End-of-session marker: tear down and report the
                        # ledger audit before closing.
                        teardown = broker.finish()
                        conn.sendall(bytes([_STATUS_CODES[teardown.kind]]))
                        _send_blob(conn, b"")
                        return
                    record = sc.Record.from_wire(blob)
                    try:
                        frame = sc.open_record(keys, record)
                    except (sc.AuthFailure, sc.ReplayOrGap):
                        conn.sendall(bytes([255]))
                        _send_blob(conn, b"")
                        continue
                    response, verdict = broker.handle_frame(frame)
                    conn.sendall(bytes([_STATUS_CODES[verdict.kind]]))
                    if response is None:
                        _send_blob(conn, b"")
                    else:
                        reply = sc.seal(keys, sc.Direction.SERVER_TO_CLIENT, response)
                        _send_blob(conn, reply.to_wire())
                    if verdict.kind is VerdictKind.CRASH:
                        return
        except (ConnectionError, OSError):
            pass
        finally:
            gate.release()


class TcpBrokerClient:
    """Client side of the TCP transport; REJECTED means the record failed auth."""

    REJECTED = "record_rejected"

    def __init__(self, port: int, secret: bytes = SESSION_SECRET):
        self._sock = socket.create_connection(("127.0.0.1", port), timeout=10)
        client_nonce = os.urandom(16)
        self._sock.sendall(client_nonce)
        server_nonce = _recv_exact(self._sock, 16)
        self.keys = sc.establish_session(secret, client_nonce, server_nonce)

    def send_frame(self, frame: bytes) -> tuple[VerdictKind | str, bytes | None]:
        record = sc.seal(self.keys, sc.Direction.CLIENT_TO_SERVER, frame)
        return self.send_record(record)

    def send_record(self, record: sc.Record) -> tuple[VerdictKind | str, bytes | None]:
        _send_blob(self._sock, record.to_wire())
        status = _recv_exact(self._sock, 1)[0]
        blob = _recv_blob(self._sock)
        if status == 255:
            return self.REJECTED, None
        response = None
        if blob:
            response = sc.open_record(self.keys, sc.Record.from_wire(blob))
        return _STATUS_KINDS[status], response

    def end_session(self) -> VerdictKind:
        """Signal end of session; returns the broker's teardown verdict."""
        _send_blob(self._sock, b"")
        status = _recv_exact(self._sock, 1)[0]
        _recv_blob(self._sock)
        return _STATUS_KINDS[status]

    def close(self) -> None:
        self._sock.close()
