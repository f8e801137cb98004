"""Campaign pipeline: bounded exploration, seed handoff, live-session fuzzing.

A campaign runs two phases.  First the bounded engine explores the target's
parser program under a time/depth budget, confirms any safety findings by
concrete replay, and solves path conditions into a seed corpus.  Then an
encrypted client/broker session is stood up, its keys exported to the key
log, and the fuzz loop interposes on the session as a man-in-the-middle:
each execution restores a protocol-state prefix (rotating over none /
connect / connect+subscribe), injects one mutated frame, and classifies the
outcome.  In ``aware`` mode the injected record is rewritten through
``mutate_encrypted`` using keys read back from the key-log file; in
``blind`` mode the sealed bytes are mutated directly, which the record
layer rejects, so blind campaigns measure what key-less fuzzing can reach.

Every reported finding replays to the same anomaly kind before the report
is written.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Callable

from . import bmc_engine as bmc
from . import fuzz_engine as fz
from . import mqtt_codec as mc
from . import secure_channel as sc
from . import target_suite as ts
from .corpus import Provenance, SeedCorpus, save_corpus

log = logging.getLogger(__name__)

REPORT_VERSION = 1

PREFIX_NONE = "none"
PREFIX_CONNECT = "connect"
PREFIX_SUBSCRIBE = "connect+subscribe"
PREFIX_ROTATION = (PREFIX_NONE, PREFIX_CONNECT, PREFIX_SUBSCRIBE)

# The stateful prefix subscribes to "#" so that any publish the fuzzer
# lands in the subscribed state exercises the delivery path.
PREFIX_SCRIPTS: dict[str, tuple[mc.Packet, ...]] = {
    PREFIX_NONE: (),
    PREFIX_CONNECT: (mc.Connect(protocol_name="MQTT", keep_alive=60, client_id="fuzz"),),
    PREFIX_SUBSCRIBE: (
        mc.Connect(protocol_name="MQTT", keep_alive=60, client_id="fuzz"),
        mc.Subscribe(packet_id=1, topic_filters=(("#", 0),)),
    ),
}

SERVER_SEED_SCRIPT: tuple[mc.Packet, ...] = (
    mc.Connect(protocol_name="MQTT", keep_alive=60, client_id="seed"),
    mc.Subscribe(packet_id=1, topic_filters=(("a/#", 0),)),
    mc.Publish(topic="a/b", payload=b"hi", qos=1, packet_id=2),
    mc.Pingreq(),
    mc.Disconnect(),
)

# Every seventh execution also mutates the broker's response on its way
# back to the client, exercising the server-to-client direction.
RESPONSE_MUTATION_PERIOD = 7


class CampaignError(RuntimeError):
    """Campaign could not run to completion."""


class ReportError(OSError):
    """Report could not be written."""


@dataclass(frozen=True, slots=True)
class BmcPhaseConfig:
    depth: int = 8
    budget_seconds: float = 60.0
    packet_len: int = 10
    max_paths: int = 1024

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("bmc depth must be >= 0")
        if self.budget_seconds <= 0:
            raise ValueError("bmc budget must be positive")
        if not 1 <= self.packet_len <= 64:
            raise ValueError("bmc packet_len must be in 1..64")
        if self.max_paths < 1:
            raise ValueError("bmc max_paths must be positive")


@dataclass(frozen=True, slots=True)
class FuzzPhaseConfig:
    budget_seconds: float = 300.0
    max_execs: int = 250_000
    rng_seed: int = 0
    mode: str = "aware"

    def __post_init__(self) -> None:
        if self.budget_seconds <= 0:
            raise ValueError("fuzz budget must be positive")
        if self.max_execs < 1:
            raise ValueError("fuzz max_execs must be positive")
        if self.mode not in ("aware", "blind"):
            raise ValueError("fuzz mode must be 'aware' or 'blind'")


@dataclass(frozen=True, slots=True)
class CampaignPaths:
    corpus_dir: str
    keylog_path: str
    report_path: str
    crash_dir: str

    @classmethod
    def under(cls, out_dir: str) -> "CampaignPaths":
        return cls(
            corpus_dir=os.path.join(out_dir, "corpus"),
            keylog_path=os.path.join(out_dir, "keylog.txt"),
            report_path=os.path.join(out_dir, "report.json"),
            crash_dir=os.path.join(out_dir, "crashes"),
        )


@dataclass(frozen=True, slots=True)
class CampaignConfig:
    target: ts.TargetConfig
    paths: CampaignPaths
    bmc: BmcPhaseConfig = BmcPhaseConfig()
    fuzz: FuzzPhaseConfig = FuzzPhaseConfig()
    seed_source: str = "bmc"  # "bmc" | "random": random is the control arm
    transport: str = "memory"  # "memory" | "tcp"

    def __post_init__(self) -> None:
        if self.seed_source not in ("bmc", "random"):
            raise ValueError("seed_source must be 'bmc' or 'random'")
        if self.transport not in ("memory", "tcp"):
            raise ValueError("transport must be 'memory' or 'tcp'")

    def echo(self) -> dict:
        return {
            "target": {
                "enabled_bugs": sorted(b.value for b in self.target.enabled_bugs),
                "hang_threshold_ms": self.target.hang_threshold_ms,
                "max_clients": self.target.max_clients,
            },
            "bmc": {
                "depth": self.bmc.depth,
                "budget_seconds": self.bmc.budget_seconds,
                "packet_len": self.bmc.packet_len,
                "max_paths": self.bmc.max_paths,
            },
            "fuzz": {
                "budget_seconds": self.fuzz.budget_seconds,
                "max_execs": self.fuzz.max_execs,
                "rng_seed": self.fuzz.rng_seed,
                "mode": self.fuzz.mode,
            },
            "paths": {
                "corpus_dir": self.paths.corpus_dir,
                "keylog_path": self.paths.keylog_path,
                "report_path": self.paths.report_path,
                "crash_dir": self.paths.crash_dir,
            },
            "seed_source": self.seed_source,
            "transport": self.transport,
        }


@dataclass(frozen=True, slots=True)
class Finding:
    id: str
    kind: str
    phase: str  # "bmc" | "fuzz"
    reproducer_file: str
    prefix: str
    trace: tuple[str, ...]
    first_seen: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "phase": self.phase,
            "reproducer_file": self.reproducer_file,
            "prefix": self.prefix,
            "trace": list(self.trace),
            "first_seen": self.first_seen,
        }


def finding_id(kind: str, reproducer: bytes, prefix: str) -> str:
    digest = hashlib.sha256()
    digest.update(kind.encode())
    digest.update(b"|")
    digest.update(prefix.encode())
    digest.update(b"|")
    digest.update(reproducer)
    return digest.hexdigest()[:16]


def verdict_kind_label(verdict: ts.Verdict) -> str:
    """Unified anomaly-class vocabulary across both phases."""
    if verdict.kind is ts.VerdictKind.CRASH:
        assert verdict.crash_kind is not None
        return verdict.crash_kind.value
    if verdict.kind is ts.VerdictKind.LEAK_DETECTED:
        return bmc.FindingKind.RESOURCE_LEAK.value
    if verdict.kind is ts.VerdictKind.HANG:
        return "hang"
    if verdict.kind is ts.VerdictKind.PROTOCOL_VIOLATION:
        return "protocol_violation"
    raise ValueError(f"not an anomaly: {verdict.kind}")


def classify_verdict(
    handler_verdict: ts.Verdict,
    elapsed_ms: float,
    hang_threshold_ms: float,
    teardown: ts.Verdict | None = None,
    violation: str | None = None,
) -> ts.Verdict:
    """Fold the raw outcome sources into the one verdict for this execution.

    Trapped anomalies win; then wall-clock hangs, then teardown ledger
    imbalance, then response-rule violations; otherwise the handler verdict
    (Ok or a graceful reject) stands.
    """
    if handler_verdict.is_anomaly:
        return handler_verdict
    if elapsed_ms > hang_threshold_ms:
        return ts.Verdict.hang(elapsed_ms)
    if teardown is not None and teardown.is_anomaly:
        return teardown
    if violation is not None:
        return ts.Verdict(ts.VerdictKind.PROTOCOL_VIOLATION, detail=violation)
    return handler_verdict


def response_violation(
    packet: mc.Packet | mc.DecodeError, phase_before: ts.Phase, response: bytes | None
) -> str | None:
    """Check a broker response against the protocol rules; None if conforming."""
    expected = ts.expected_response_type(packet, phase_before)
    if expected is None:
        # Responses to rejected packets (e.g. a refused CONNECT) are allowed.
        return None
    if response is None:
        return f"missing {expected.__name__} response"
    decoded = mc.decode_packet(response)
    if not isinstance(decoded, expected):
        return f"expected {expected.__name__}, got {mc.packet_outcome(decoded)}"
    return None


# ---------------------------------------------------------------------------
# Phase 1: bounded exploration.
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class BmcPhaseResult:
    exploration: bmc.ExplorationResult
    corpus: SeedCorpus
    findings: tuple[Finding, ...]
    non_reproducible: int
    elapsed_seconds: float


def run_bmc_phase(config: CampaignConfig) -> BmcPhaseResult:
    started = time.monotonic()
    model = ts.export_parser_model(config.target)
    packet = bmc.SymbolicPacket.fully_symbolic(config.bmc.packet_len)
    exploration = bmc.explore_paths(
        model,
        packet,
        bmc.ExploreConfig(
            depth=config.bmc.depth,
            budget_seconds=config.bmc.budget_seconds,
            max_paths=config.bmc.max_paths,
        ),
    )
    corpus = bmc.emit_seeds(exploration.paths, packet, config.paths.corpus_dir)

    # One confirmed counterexample per safety kind: the shallowest path wins.
    findings: dict[str, Finding] = {}
    non_reproducible = 0
    for index, pc in enumerate(exploration.paths):
        if not pc.complete:
            continue
        check = bmc.check_safety(model, pc, packet)
        non_reproducible += len(check.non_reproducible)
        for safety in check.findings:
            kind = safety.kind.value
            if kind in findings:
                continue
            reproducer_file = _write_reproducer(
                config.paths.crash_dir, safety.witness, kind, "bmc", PREFIX_NONE, index, config
            )
            findings[kind] = Finding(
                id=finding_id(kind, safety.witness, PREFIX_NONE),
                kind=kind,
                phase="bmc",
                reproducer_file=reproducer_file,
                prefix=PREFIX_NONE,
                trace=tuple(f"{label}: {detail}" if detail else label for label, detail in safety.trace),
                first_seen=index,
            )
    return BmcPhaseResult(
        exploration=exploration,
        corpus=corpus,
        findings=tuple(findings.values()),
        non_reproducible=non_reproducible,
        elapsed_seconds=time.monotonic() - started,
    )


def _write_reproducer(
    crash_dir: str,
    data: bytes,
    kind: str,
    phase: str,
    prefix: str,
    seen: int,
    config: CampaignConfig,
    op: fz.MutationOp | None = None,
) -> str:
    bin_path, _ = fz.write_crash_artifact(
        crash_dir,
        data,
        {
            "verdict": kind,
            "phase": phase,
            "session_prefix": prefix,
            "first_seen": seen,
            "rng_seed": config.fuzz.rng_seed,
            "enabled_bugs": sorted(b.value for b in config.target.enabled_bugs),
            "op_log": [repr(op)] if op is not None else [],
        },
    )
    return bin_path


# ---------------------------------------------------------------------------
# Seed handoff.
# ---------------------------------------------------------------------------


def server_generated_frames(config: CampaignConfig) -> list[bytes]:
    """The broker's legitimate responses to a canonical session script."""
    transcript, verdict = ts.run_session(
        list(SERVER_SEED_SCRIPT), ts.TargetConfig(), nonce_seed=0
    )
    assert not verdict.is_anomaly
    return [frame for direction, frame in transcript if direction == "s2c"]


def convert_seeds(
    bmc_corpus: SeedCorpus, server_frames: list[bytes]
) -> list[fz.Seed]:
    """Fuzz queue: BMC seeds by depth ascending, then server frames."""
    queue: list[fz.Seed] = []
    seen: set[bytes] = set()
    for entry in sorted(bmc_corpus.entries, key=lambda e: e.depth):
        data = bmc_corpus.read_seed(entry)
        if data in seen or len(data) > fz.MAX_INPUT:
            continue
        seen.add(data)
        queue.append(fz.Seed(data=data, provenance=Provenance.BMC))
    if not queue:
        log.warning("empty BMC corpus; fuzzing from server frames only")
    for frame in server_frames:
        if frame in seen:
            continue
        seen.add(frame)
        queue.append(fz.Seed(data=frame, provenance=Provenance.SERVER_GENERATED))
    return queue


def random_seeds(count: int, rng: random.Random) -> list[fz.Seed]:
    """Control-arm corpus: random byte strings instead of BMC output."""
    seeds = []
    seen: set[bytes] = set()
    while len(seeds) < count:
        data = rng.randbytes(rng.randrange(1, 17))
        if data in seen:
            continue
        seen.add(data)
        seeds.append(fz.Seed(data=data, provenance=Provenance.MUTATED))
    return seeds


# ---------------------------------------------------------------------------
# Phase 2: the interposed fuzz loop.
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class FuzzStats:
    phase: str = "fuzz"
    execs: int = 0
    execs_per_sec: float = 0.0
    corpus_size: int = 0
    coverage_buckets: int = 0
    findings: int = 0
    elapsed_seconds: float = 0.0
    rejected_records: int = 0


@dataclass(frozen=True, slots=True)
class FuzzPhaseResult:
    stats: FuzzStats
    findings: tuple[Finding, ...]


class _SessionHarness:
    """One live encrypted session with the fuzzer interposed on both directions.

    The harness owns the wire counters: a record slot is consumed per
    delivery attempt whether or not the record authenticates, which keeps
    client and broker in lock step even when blind-mode tampering is
    rejected at open.
    """

    def __init__(self, config: CampaignConfig, run_map: fz.CoverageMap):
        self.config = config
        client_nonce, server_nonce = ts.session_nonces(0)
        self.client_keys = sc.establish_session(
            ts.SESSION_SECRET, client_nonce, server_nonce
        )
        self.server_keys = self.client_keys.fresh()
        self.run_map = run_map
        self.broker = ts.Broker(config.target, probe_sink=run_map)
        self.c2s_seq = 0
        self.s2c_seq = 0
        self.rejected_records = 0

    def export_keys(self) -> None:
        parent = os.path.dirname(os.path.abspath(self.config.paths.keylog_path))
        try:
            os.makedirs(parent, exist_ok=True)
        except OSError as exc:
            raise sc.KeyLogError(f"cannot create key log directory: {exc}") from exc
        sc.write_keylog_entry(
            self.config.paths.keylog_path, self.server_keys, sc.AEAD_V1
        )

    def keylog(self) -> sc.KeyLog:
        return sc.parse_keylog(self.config.paths.keylog_path)

    def snapshot_prefixes(self) -> dict[str, ts.BrokerSnapshot]:
        """Replay each session prefix once; later executions restore copies."""
        snapshots: dict[str, ts.BrokerSnapshot] = {}
        sink, self.broker.probe_sink = self.broker.probe_sink, None
        for name, script in PREFIX_SCRIPTS.items():
            self.broker.restore(_FRESH_SNAPSHOT)
            for packet in script:
                frame = mc.encode_packet(packet)
                record = sc.seal_at(
                    self.client_keys, sc.Direction.CLIENT_TO_SERVER, self.c2s_seq, frame
                )
                self.c2s_seq += 1
                delivered = sc.decrypt_record(self.server_keys, record)
                response, verdict = self.broker.handle_frame(delivered)
                assert verdict.kind is ts.VerdictKind.OK, (name, verdict)
                if response is not None:
                    self.s2c_seq += 1
            snapshots[name] = self.broker.snapshot()
        self.broker.probe_sink = sink
        return snapshots

    def deliver_c2s(self, record: sc.Record) -> bytes | None:
        """Broker-side open; a failed record consumes its wire slot."""
        try:
            return sc.decrypt_record(self.server_keys, record)
        except sc.AuthFailure:
            self.rejected_records += 1
            return None

    def send_response(
        self, response: bytes, keylog: sc.KeyLog | None, op: fz.MutationOp | None
    ) -> bytes | None:
        """Seal the broker's response; optionally interpose on it too."""
        record = sc.seal_at(
            self.server_keys, sc.Direction.SERVER_TO_CLIENT, self.s2c_seq, response
        )
        self.s2c_seq += 1
        if op is not None and keylog is not None:
            record = fz.mutate_encrypted(record, keylog, op)
        try:
            return sc.decrypt_record(self.client_keys, record)
        except sc.AuthFailure:
            self.rejected_records += 1
            return None


_FRESH_SNAPSHOT = ts.Broker(ts.TargetConfig()).snapshot()


def run_fuzz_phase(
    config: CampaignConfig,
    seeds: list[fz.Seed],
    progress: Callable[[FuzzStats], None] | None = None,
) -> FuzzPhaseResult:
    started = time.monotonic()
    deadline = started + config.fuzz.budget_seconds
    rng = random.Random(config.fuzz.rng_seed)
    run_map = fz.CoverageMap()
    harness = _SessionHarness(config, run_map)

    aware = config.fuzz.mode == "aware"
    keylog: sc.KeyLog | None = None
    try:
        harness.export_keys()
        keylog = harness.keylog()
    except sc.KeyLogError:
        if aware:
            raise
        log.warning("key log unavailable; blind mode continues without it")

    snapshots = harness.snapshot_prefixes()
    fuzzer = fz.Fuzzer(seeds, rng)
    broker = harness.broker
    threshold_ms = config.target.hang_threshold_ms
    bugs_enabled = bool(config.target.enabled_bugs)

    findings: dict[tuple[str, str], Finding] = {}
    stats = FuzzStats(corpus_size=len(fuzzer.queue))
    next_progress = started

    while fuzzer.execs < config.fuzz.max_execs:
        now = time.monotonic()
        if now > deadline:
            break
        if progress is not None and now >= next_progress:
            _fill_stats(stats, fuzzer, harness, findings, started)
            progress(stats)
            next_progress = now + 0.25

        seed, op = fuzzer.select()
        prefix = PREFIX_ROTATION[fuzzer.execs % len(PREFIX_ROTATION)]
        broker.restore(snapshots[prefix])
        phase_before = broker.phase

        record = sc.seal_at(
            harness.client_keys,
            sc.Direction.CLIENT_TO_SERVER,
            harness.c2s_seq,
            seed.data,
        )
        harness.c2s_seq += 1
        run_map.reset()
        if aware:
            assert keylog is not None
            record = fz.mutate_encrypted(record, keylog, op)
        else:
            ciphertext = fz.mutate(record.ciphertext, op)
            if ciphertext == record.ciphertext:
                # Blind tampering always modifies the wire bytes; degenerate
                # no-op draws fall back to a single bit flip.
                ciphertext = fz.mutate(ciphertext, fz.BitFlip(bit=0))
            record = sc.Record(
                record.session_id,
                record.direction,
                record.seq,
                record.nonce,
                ciphertext,
            )

        delivered = harness.deliver_c2s(record)
        if delivered is None:
            fuzzer.record_result(seed, seed.data, run_map)
            continue

        handler_started = time.perf_counter()
        response, handler_verdict = broker.handle_frame(delivered)
        elapsed_ms = (time.perf_counter() - handler_started) * 1000.0

        teardown = broker.finish() if not handler_verdict.is_anomaly else None
        violation = None
        if not bugs_enabled and not handler_verdict.is_anomaly:
            decoded = mc.decode_packet(delivered)
            violation = response_violation(decoded, phase_before, response)
        verdict = classify_verdict(
            handler_verdict, elapsed_ms, threshold_ms, teardown, violation
        )

        if response is not None:
            response_op = None
            if aware and fuzzer.execs % RESPONSE_MUTATION_PERIOD == 3:
                response_op = fz.draw_op(rng, seed, fuzzer.queue)
            harness.send_response(response, keylog, response_op)

        fuzzer.record_result(seed, delivered, run_map)

        if verdict.is_anomaly:
            # Retain the first exemplar per (kind, prefix); later inputs
            # reproducing the same anomaly in the same state add nothing.
            key = (verdict_kind_label(verdict), prefix)
            if key not in findings:
                finding = _fuzz_finding(
                    config, snapshots, broker, delivered, prefix, verdict, fuzzer.execs, op
                )
                if finding is not None:
                    findings[key] = finding

    _fill_stats(stats, fuzzer, harness, findings, started)
    if progress is not None:
        progress(stats)
    return FuzzPhaseResult(stats=stats, findings=tuple(findings.values()))


def _fill_stats(stats, fuzzer, harness, findings, started) -> None:
    stats.execs = fuzzer.execs
    stats.elapsed_seconds = time.monotonic() - started
    stats.execs_per_sec = fuzzer.execs / stats.elapsed_seconds if stats.elapsed_seconds else 0.0
    stats.corpus_size = len(fuzzer.queue)
    stats.coverage_buckets = fuzzer.coverage.buckets_hit
    stats.findings = len(findings)
    stats.rejected_records = harness.rejected_records


def _fuzz_finding(
    config: CampaignConfig,
    snapshots: dict[str, ts.BrokerSnapshot],
    broker: ts.Broker,
    frame: bytes,
    prefix: str,
    verdict: ts.Verdict,
    exec_index: int,
    op: fz.MutationOp | None = None,
) -> Finding | None:
    """Validate by replay, then record the finding with its artifacts."""
    kind = verdict_kind_label(verdict)
    if verdict.kind is not ts.VerdictKind.HANG:
        broker.restore(snapshots[prefix])
        phase_before = broker.phase
        response, replay_verdict = broker.handle_frame(frame)
        teardown = broker.finish() if not replay_verdict.is_anomaly else None
        violation = None
        if not config.target.enabled_bugs and not replay_verdict.is_anomaly:
            violation = response_violation(
                mc.decode_packet(frame), phase_before, response
            )
        replayed = classify_verdict(
            replay_verdict, 0.0, config.target.hang_threshold_ms, teardown, violation
        )
        if not replayed.is_anomaly or verdict_kind_label(replayed) != kind:
            log.warning("finding did not replay; dropped (kind=%s)", kind)
            return None
    trace = verdict.probe_trace if verdict.probe_trace else tuple(broker.trace)
    reproducer_file = _write_reproducer(
        config.paths.crash_dir, frame, kind, "fuzz", prefix, exec_index, config, op
    )
    return Finding(
        id=finding_id(kind, frame, prefix),
        kind=kind,
        phase="fuzz",
        reproducer_file=reproducer_file,
        prefix=prefix,
        trace=trace,
        first_seen=exec_index,
    )


def run_fuzz_phase_tcp(
    config: CampaignConfig,
    seeds: list[fz.Seed],
    progress: Callable[[FuzzStats], None] | None = None,
) -> FuzzPhaseResult:
    """The fuzz loop against the broker served over localhost TCP.

    One connection per execution (a fresh broker session), with the prefix
    replayed over the wire and keys followed incrementally from the key
    log.  Slower than in-memory mode but exercises the cross-process wire
    path end to end.  Hangs are judged by round-trip time.
    """
    started = time.monotonic()
    deadline = started + config.fuzz.budget_seconds
    rng = random.Random(config.fuzz.rng_seed)
    run_map = fz.CoverageMap()
    aware = config.fuzz.mode == "aware"
    fuzzer = fz.Fuzzer(seeds, rng)
    findings: dict[tuple[str, str], Finding] = {}
    stats = FuzzStats(corpus_size=len(fuzzer.queue))
    rejected = 0

    # In-process twin used only to validate findings by replay.
    twin = ts.Broker(config.target)
    twin_snapshots = _twin_snapshots(config)

    os.makedirs(os.path.dirname(os.path.abspath(config.paths.keylog_path)), exist_ok=True)
    reader = sc.KeyLogReader(config.paths.keylog_path)
    keylog_entries: list[sc.KeyLogEntry] = []
    next_progress = started

    with ts.TcpBrokerServer(
        config.target, keylog_path=config.paths.keylog_path, probe_sink=run_map
    ) as server:
        while fuzzer.execs < config.fuzz.max_execs:
            now = time.monotonic()
            if now > deadline:
                break
            if progress is not None and now >= next_progress:
                _fill_tcp_stats(stats, fuzzer, findings, rejected, started)
                progress(stats)
                next_progress = now + 0.25

            seed, op = fuzzer.select()
            prefix = PREFIX_ROTATION[fuzzer.execs % len(PREFIX_ROTATION)]
            client = ts.TcpBrokerClient(server.port)
            injected = seed.data
            try:
                for packet in PREFIX_SCRIPTS[prefix]:
                    client.send_frame(mc.encode_packet(packet))
                record = sc.seal(
                    client.keys, sc.Direction.CLIENT_TO_SERVER, seed.data
                )
                if aware:
                    # The server appends this session's keys after the
                    # handshake; wait for the line to land before mutating.
                    for _ in range(200):
                        keylog_entries.extend(reader.poll())
                        if any(
                            e.session_id == client.keys.session_id
                            for e in keylog_entries
                        ):
                            break
                        time.sleep(0.002)
                    keylog = sc.KeyLog(entries=tuple(keylog_entries))
                    record = fz.mutate_encrypted(record, keylog, op)
                    injected = fz.mutate(seed.data, op)
                else:
                    ciphertext = fz.mutate(record.ciphertext, op)
                    if ciphertext == record.ciphertext:
                        ciphertext = fz.mutate(ciphertext, fz.BitFlip(bit=0))
                    record = sc.Record(
                        record.session_id,
                        record.direction,
                        record.seq,
                        record.nonce,
                        ciphertext,
                    )
                run_map.reset()
                sent = time.perf_counter()
                status, _ = client.send_record(record)
                elapsed_ms = (time.perf_counter() - sent) * 1000.0
                if status == ts.TcpBrokerClient.REJECTED:
                    rejected += 1
                    fuzzer.record_result(seed, seed.data, run_map)
                    continue
                teardown_kind = None
                if status is not ts.VerdictKind.CRASH:
                    teardown_kind = client.end_session()
            except (ConnectionError, OSError):
                fuzzer.record_result(seed, seed.data, run_map)
                continue
            finally:
                client.close()

            fuzzer.record_result(seed, injected, run_map)

            anomaly = (
                status is ts.VerdictKind.CRASH
                or teardown_kind is ts.VerdictKind.LEAK_DETECTED
                or elapsed_ms > config.target.hang_threshold_ms
            )
            if anomaly:
                frame = injected
                twin.restore(twin_snapshots[prefix])
                _, twin_verdict = twin.handle_frame(frame)
                teardown = twin.finish() if not twin_verdict.is_anomaly else None
                verdict = classify_verdict(
                    twin_verdict,
                    elapsed_ms,
                    config.target.hang_threshold_ms,
                    teardown,
                    None,
                )
                if verdict.is_anomaly:
                    key = (verdict_kind_label(verdict), prefix)
                    if key not in findings:
                        finding = _fuzz_finding(
                            config, twin_snapshots, twin, frame, prefix, verdict, fuzzer.execs, op
                        )
                        if finding is not None:
                            findings[key] = finding

    _fill_tcp_stats(stats, fuzzer, findings, rejected, started)
    if progress is not None:
        progress(stats)
    return FuzzPhaseResult(stats=stats, findings=tuple(findings.values()))


def _twin_snapshots(config: CampaignConfig) -> dict[str, ts.BrokerSnapshot]:
    twin = ts.Broker(config.target)
    snapshots = {}
    for name, script in PREFIX_SCRIPTS.items():
        twin.restore(_FRESH_SNAPSHOT)
        for packet in script:
            twin.handle_frame(mc.encode_packet(packet))
        snapshots[name] = twin.snapshot()
    return snapshots


def _fill_tcp_stats(stats, fuzzer, findings, rejected, started) -> None:
    stats.execs = fuzzer.execs
    stats.elapsed_seconds = time.monotonic() - started
    stats.execs_per_sec = fuzzer.execs / stats.elapsed_seconds if stats.elapsed_seconds else 0.0
    stats.corpus_size = len(fuzzer.queue)
    stats.coverage_buckets = fuzzer.coverage.buckets_hit
    stats.findings = len(findings)
    stats.rejected_records = rejected


# ---------------------------------------------------------------------------
# Reports.
# ---------------------------------------------------------------------------

TIMING_FIELDS = ("elapsed_seconds", "execs_per_sec")


@dataclass(frozen=True, slots=True)
class CampaignReport:
    config: dict
    bmc_phase: dict
    fuzz_phase: dict
    findings: tuple[Finding, ...]

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "config": self.config,
            "bmc": self.bmc_phase,
            "fuzz": self.fuzz_phase,
            "findings": [f.to_json() for f in self.findings],
        }


def strip_timing(report: dict) -> dict:
    """Copy of a report dict with wall-clock-dependent fields removed."""
    out = json.loads(json.dumps(report))
    for section in ("bmc", "fuzz"):
        for field_name in TIMING_FIELDS:
            out.get(section, {}).pop(field_name, None)
    return out


def write_report(report: CampaignReport, path: str) -> None:
    """Atomic write (temp file + rename) of the schema-valid report."""
    payload = report.to_json()
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from exc


def load_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# The pipeline.
# ---------------------------------------------------------------------------


def run_campaign(
    config: CampaignConfig,
    progress: Callable[[FuzzStats], None] | None = None,
) -> CampaignReport:
    """Both phases end to end; writes the report before returning."""
    if os.path.exists(config.paths.keylog_path):
        os.remove(config.paths.keylog_path)

    bmc_result = run_bmc_phase(config)
    log.info(
        "bmc phase: %d paths (%d seeds) in %.2fs, %d finding kinds",
        len(bmc_result.exploration.paths),
        len(bmc_result.corpus.entries),
        bmc_result.elapsed_seconds,
        len(bmc_result.findings),
    )

    server_frames = server_generated_frames(config)
    if config.seed_source == "bmc":
        seeds = convert_seeds(bmc_result.corpus, server_frames)
    else:
        seeds = random_seeds(
            max(1, len(bmc_result.corpus.entries)) + len(server_frames),
            random.Random(config.fuzz.rng_seed ^ 0x5EED),
        )
    fuzz = run_fuzz_phase_tcp if config.transport == "tcp" else run_fuzz_phase
    fuzz_result = fuzz(config, seeds, progress)

    all_findings = sorted(
        list(bmc_result.findings) + list(fuzz_result.findings),
        key=lambda f: (f.phase, f.first_seen, f.id),
    )
    report = CampaignReport(
        config=config.echo(),
        bmc_phase={
            "paths": len(bmc_result.exploration.paths),
            "truncated": bmc_result.exploration.truncated,
            "seeds": len(bmc_result.corpus.entries),
            "non_reproducible": bmc_result.non_reproducible,
            "elapsed_seconds": bmc_result.elapsed_seconds,
            "findings": [f.to_json() for f in bmc_result.findings],
        },
        fuzz_phase={
            "execs": fuzz_result.stats.execs,
            "execs_per_sec": round(fuzz_result.stats.execs_per_sec, 1),
            "corpus_size": fuzz_result.stats.corpus_size,
            "coverage_buckets": fuzz_result.stats.coverage_buckets,
            "rejected_records": fuzz_result.stats.rejected_records,
            "elapsed_seconds": fuzz_result.stats.elapsed_seconds,
            "findings": [f.to_json() for f in fuzz_result.findings],
        },
        findings=tuple(all_findings),
    )
    write_report(report, config.paths.report_path)
    return report
