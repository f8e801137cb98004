"""Bounded exploration of packet-handling logic over symbolic packet bytes.

The engine interprets an *instrumented decision program*: a pure function
written against the :class:`Tape` interface, which exposes every branch the
parser takes as an explicit decision over one byte position (or over the
total frame length).  Constraints are per-variable byte domains plus bounds
on a single length variable, so satisfiability is decided exactly by domain
intersection; no external solver is involved.

Exploration is breadth-first re-execution: a path is a sequence of decision
labels, and each frontier expansion re-runs the program with the prefix
forced, enumerating the feasible outcomes of the next decision.  Paths are
cut at the depth bound ``k`` and the result carries a ``truncated`` flag.

Witnesses are always the lexicographically smallest satisfying assignment,
so identical configurations replay to identical seeds and findings.
"""

from __future__ import annotations

import hashlib
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence

from .corpus import Provenance, SeedCorpus, save_corpus

FULL_DOMAIN = frozenset(range(256))

_SINGLE_BYTE = frozenset(range(0x80))
_CONT_BYTE = frozenset(range(0x80, 0x100))

ABSENT = "absent"


class FindingKind(Enum):
    ABSENT_HANDLE_RELEASE = "absent_handle_release"
    INDEX_OUT_OF_BOUNDS = "index_out_of_bounds"
    RESOURCE_LEAK = "resource_leak"
    ASSERTION_VIOLATION = "assertion_violation"


ALL_FINDING_KINDS = frozenset(FindingKind)


@dataclass(frozen=True, slots=True)
class Concrete:
    value: int


@dataclass(frozen=True, slots=True)
class Symbolic:
    var_id: str
    domain: frozenset[int] = FULL_DOMAIN


SymbolicByte = Concrete | Symbolic


@dataclass(frozen=True, slots=True)
class SymbolicPacket:
    """Maximum-layout byte template plus an optional symbolic total length.

    With ``length_var`` set, the packet stands for every frame whose length
    is between 1 and ``len(layout)``; without it, the frame length is fixed.
    """

    layout: tuple[SymbolicByte, ...]
    length_var: str | None = None

    def __post_init__(self) -> None:
        if not self.layout:
            raise ValueError("symbolic packet needs at least one byte")
        seen: set[str] = set()
        for b in self.layout:
            if isinstance(b, Symbolic):
                if not b.domain:
                    raise ValueError(f"empty domain for {b.var_id}")
                if b.var_id in seen:
                    raise ValueError(f"duplicate var id {b.var_id}")
                seen.add(b.var_id)

    @classmethod
    def fully_symbolic(cls, size: int) -> "SymbolicPacket":
        return cls(
            layout=tuple(Symbolic(f"b{i}") for i in range(size)),
            length_var="len",
        )

    def initial_domains(self) -> list[frozenset[int]]:
        return [
            b.domain if isinstance(b, Symbolic) else frozenset((b.value,))
            for b in self.layout
        ]

    def var_positions(self) -> dict[str, int]:
        return {
            b.var_id: i for i, b in enumerate(self.layout) if isinstance(b, Symbolic)
        }

    def length_bounds(self) -> tuple[int, int]:
        if self.length_var is None:
            return len(self.layout), len(self.layout)
        return 1, len(self.layout)


# Constraint vocabulary.  LenGe is needed alongside LenEq/LenLe because a
# path that stops before consuming the whole frame bounds the length only
# from below; without it the solved witness could be too short to replay
# the same branch sequence.
@dataclass(frozen=True, slots=True)
class Eq:
    var: str
    value: int


@dataclass(frozen=True, slots=True)
class InSet:
    var: str
    values: frozenset[int]


@dataclass(frozen=True, slots=True)
class InRange:
    var: str
    lo: int
    hi: int


@dataclass(frozen=True, slots=True)
class LenEq:
    var: str
    value: int


@dataclass(frozen=True, slots=True)
class LenLe:
    var: str
    value: int


@dataclass(frozen=True, slots=True)
class LenGe:
    var: str
    value: int


Constraint = Eq | InSet | InRange | LenEq | LenLe | LenGe


@dataclass(frozen=True, slots=True)
class PathCondition:
    constraints: tuple[Constraint, ...]
    path_id: str
    depth: int
    complete: bool = True
    outcome: str | None = None
    decisions: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True, slots=True)
class Event:
    """One effect emitted by the program: a trace step and monitor input."""

    label: str
    detail: str = ""


@dataclass(frozen=True, slots=True)
class SafetyFinding:
    kind: FindingKind
    trace: tuple[tuple[str, str], ...]
    witness: bytes
    path: PathCondition


class Tape(Protocol):
    """Branch-point interface an instrumented decision program runs against."""

    def choose(
        self,
        site: str,
        pos: int,
        arms: Sequence[tuple[str, frozenset[int]]],
        default: str | None = None,
    ) -> str:
        """Branch on the byte at ``pos``.

        Returns the matching arm label, ``default`` for bytes outside all
        arms, or ``"absent"`` when the frame is too short to have ``pos``.
        """
        ...

    def bind_varint(self, site: str, pos: int) -> tuple[str, int, int]:
        """Parse the 1-4 byte varint at ``pos`` and compare the declared
        total against the frame length.

        Returns ``(status, value, nbytes)`` with status one of ``"eq"``
        (parsed, frame length equals ``pos + nbytes + value``; one outcome
        per value), ``"short"``/``"long"`` (mismatch either way; terminal,
        so each is a single merged outcome), ``"trunc"`` (varint itself cut
        off), ``"min"`` (non-minimal), ``"over"`` (needs a fifth byte) or
        ``"absent"`` (no byte at ``pos``).  ``value`` is meaningful only
        for ``"eq"``.
        """
        ...

    def bind_u16(self, site: str, pos: int, budget: int) -> tuple[str, int]:
        """Branch jointly on the big-endian u16 at ``pos`` against ``budget``.

        Returns ``("fit", value)`` when value <= budget, else
        ``("over_hi"|"over_lo", value)``.  Both bytes must be present and
        ``budget`` must be below 256 so outcomes stay per-variable.
        """
        ...

    def effect(self, label: str, detail: str = "") -> None:
        """Record a non-branching step (monitor event or trace note)."""
        ...


@dataclass(frozen=True)
class ParserProgram:
    """Decision program plus the ground-truth executable it mirrors."""

    name: str
    run: Callable[[Tape], str]
    concrete_check: Callable[[bytes], str | None]


class _Frontier(Exception):
    """Raised by the symbolic tape when it reaches an unforced decision."""

    def __init__(self, outcomes: list[str]):
        self.outcomes = outcomes


class SymbolicTape:
    """Replays a forced decision prefix, then reports the next frontier."""

    def __init__(self, packet: SymbolicPacket, prefix: Sequence[str]):
        self.packet = packet
        self.prefix = prefix
        self.domains = packet.initial_domains()
        self.len_lo, self.len_hi = packet.length_bounds()
        self.index = 0
        self.decisions: list[tuple[str, str]] = []
        self.events: list[Event] = []

    # -- decision plumbing -------------------------------------------------

    def _next(self, site: str, feasible: dict[str, Callable[[], None]]) -> str:
        if not feasible:
            raise RuntimeError(f"no feasible outcome at {site}")
        if self.index < len(self.prefix):
            label = self.prefix[self.index]
            apply = feasible.get(label)
            if apply is None:
                raise RuntimeError(f"forced label {label!r} infeasible at {site}")
        else:
            raise _Frontier(list(feasible))
        self.index += 1
        apply()
        self.decisions.append((site, label))
        return label

    def choose(
        self,
        site: str,
        pos: int,
        arms: Sequence[tuple[str, frozenset[int]]],
        default: str | None = None,
    ) -> str:
        domain = self.domains[pos] if pos < len(self.domains) else frozenset()
        feasible: dict[str, Callable[[], None]] = {}
        remaining = domain
        for label, values in arms:
            # First matching arm wins, mirroring the concrete tape.
            hit = remaining & values
            remaining -= values
            if hit and self.len_hi > pos:
                feasible[label] = self._apply_byte(pos, hit)
        if default is not None and remaining and self.len_hi > pos:
            feasible[default] = self._apply_byte(pos, remaining)
        if self.len_lo <= pos:
            feasible[ABSENT] = self._apply_len(self.len_lo, min(self.len_hi, pos))
        return self._next(site, feasible)

    def bind_varint(self, site: str, pos: int) -> tuple[str, int, int]:
        feasible: dict[str, Callable[[], None]] = {}
        if self.len_lo <= pos:
            feasible[ABSENT] = self._apply_len(self.len_lo, min(self.len_hi, pos))
        domain = self.domains[pos] if pos < len(self.domains) else frozenset()
        if self.len_hi > pos:
            single = domain & _SINGLE_BYTE
            min_len = max(self.len_lo, pos + 1)
            for value in sorted(single):
                total = pos + 1 + value
                if min_len <= total <= self.len_hi:
                    feasible[f"eq1@{value}"] = self._apply_byte_and_len(
                        pos, frozenset((value,)), total, total
                    )
            # short/long are terminal mismatches, so each merges into one
            # outcome.  The per-variable product over-approximates the true
            # (value, length) set; correctness relies only on the minimal
            # witness, which is genuinely short/long by construction.
            short_values = single & frozenset(range(max(1, min_len - pos), 0x80))
            if short_values:
                hi = min(self.len_hi, pos + max(short_values))
                if min_len <= hi:
                    feasible["short1"] = self._apply_byte_and_len(
                        pos, short_values, min_len, hi
                    )
            long_values = single & frozenset(range(0, max(0, self.len_hi - pos - 1)))
            if long_values:
                lo = max(self.len_lo, pos + 2 + min(long_values))
                if lo <= self.len_hi:
                    feasible["long1"] = self._apply_byte_and_len(
                        pos, long_values, lo, self.len_hi
                    )
            self._continuation_outcomes(feasible, pos, domain & _CONT_BYTE, depth=2)
        label = self._next(site, feasible)
        if label == ABSENT:
            return ABSENT, 0, 0
        if label.startswith("eq1@"):
            return "eq", int(label[4:]), 1
        if label in ("short1", "long1"):
            return label[:-1], 0, 1
        kind = label[:-1]
        return kind, 0, int(label[-1])

    def _continuation_outcomes(
        self,
        feasible: dict[str, Callable[[], None]],
        start: int,
        lead_domain: frozenset[int],
        depth: int,
    ) -> None:
        """Outcomes for varints of ``depth`` bytes whose lead bytes are all
        continuations.  Declared values are then at least 128, far beyond any
        packet this engine explores, so the parsed cases merge into a single
        always-short outcome per width."""
        if not lead_domain:
            return
        pos = start + depth - 1
        committed: list[tuple[int, frozenset[int]]] = [
            (start + i, self.domains[start + i] & _CONT_BYTE) for i in range(depth - 1)
        ]
        if any(not dom for _, dom in committed):
            return
        lo, hi = max(self.len_lo, pos), min(self.len_hi, pos)
        if lo <= hi:
            feasible[f"trunc{depth}"] = self._apply_many(committed, (lo, hi))
        if self.len_hi <= pos:
            return
        domain = self.domains[pos] if pos < len(self.domains) else frozenset()
        if depth == 5:
            if domain:
                feasible["over5"] = self._apply_many(
                    committed + [(pos, domain)], (max(self.len_lo, pos + 1), self.len_hi)
                )
            return
        if 0 in domain:
            feasible[f"min{depth}"] = self._apply_many(
                committed + [(pos, frozenset((0,)))],
                (max(self.len_lo, pos + 1), self.len_hi),
            )
        last = domain & frozenset(range(1, 0x80))
        if last:
            if 128 + pos <= len(self.domains):
                raise NotImplementedError(
                    "packet too large for merged multi-byte varint outcomes"
                )
            feasible[f"short{depth}"] = self._apply_many(
                committed + [(pos, last)], (max(self.len_lo, pos + 1), self.len_hi)
            )
        self._continuation_outcomes(feasible, start, domain & _CONT_BYTE, depth + 1)

    def bind_u16(self, site: str, pos: int, budget: int) -> tuple[str, int]:
        if self.len_lo <= pos + 1:
            raise RuntimeError(f"bind_u16 at {site}: positions may be absent")
        if budget >= 256:
            raise ValueError("bind_u16 budget must stay below 256")
        hi_domain, lo_domain = self.domains[pos], self.domains[pos + 1]
        feasible: dict[str, Callable[[], None]] = {}
        if 0 in hi_domain:
            for value in sorted(lo_domain):
                if value <= budget:
                    feasible[f"fit@{value}"] = self._apply_many(
                        [(pos, frozenset((0,))), (pos + 1, frozenset((value,)))],
                        (self.len_lo, self.len_hi),
                    )
            over_lo = lo_domain & frozenset(range(budget + 1, 256))
            if over_lo:
                feasible["over_lo"] = self._apply_many(
                    [(pos, frozenset((0,))), (pos + 1, over_lo)],
                    (self.len_lo, self.len_hi),
                )
        over_hi = hi_domain & frozenset(range(1, 256))
        if over_hi:
            feasible["over_hi"] = self._apply_many(
                [(pos, over_hi)], (self.len_lo, self.len_hi)
            )
        label = self._next(site, feasible)
        if label.startswith("fit@"):
            return "fit", int(label[4:])
        return label, budget + 1

    def effect(self, label: str, detail: str = "") -> None:
        self.events.append(Event(label, detail))

    # -- domain updates, applied only when an outcome is committed ---------

    def _apply_many(
        self, updates: list[tuple[int, frozenset[int]]], bounds: tuple[int, int]
    ) -> Callable[[], None]:
        def apply() -> None:
            for pos, values in updates:
                self.domains[pos] = values
            self.len_lo, self.len_hi = bounds

        return apply

    def _apply_byte(self, pos: int, values: frozenset[int]) -> Callable[[], None]:
        def apply() -> None:
            self.domains[pos] = values
            if self.len_lo <= pos:
                self.len_lo = pos + 1

        return apply

    def _apply_len(self, lo: int, hi: int) -> Callable[[], None]:
        def apply() -> None:
            self.len_lo, self.len_hi = lo, hi

        return apply

    def _apply_byte_and_len(
        self, pos: int, values: frozenset[int], lo: int, hi: int
    ) -> Callable[[], None]:
        def apply() -> None:
            self.domains[pos] = values
            self.len_lo, self.len_hi = lo, hi

        return apply

    # -- results ------------------------------------------------------------

    def path_condition(self, complete: bool, outcome: str | None) -> PathCondition:
        packet = self.packet
        initial = packet.initial_domains()
        constraints: list[Constraint] = []
        for pos, byte in enumerate(packet.layout):
            if not isinstance(byte, Symbolic):
                continue
            domain = self.domains[pos]
            if domain == initial[pos]:
                continue
            constraints.append(_byte_constraint(byte.var_id, domain))
        if packet.length_var is not None:
            init_lo, init_hi = packet.length_bounds()
            if self.len_lo == self.len_hi:
                if (self.len_lo, self.len_hi) != (init_lo, init_hi):
                    constraints.append(LenEq(packet.length_var, self.len_lo))
            else:
                if self.len_lo > init_lo:
                    constraints.append(LenGe(packet.length_var, self.len_lo))
                if self.len_hi < init_hi:
                    constraints.append(LenLe(packet.length_var, self.len_hi))
        return PathCondition(
            constraints=tuple(constraints),
            path_id="-".join(label for _, label in self.decisions),
            depth=len(self.decisions),
            complete=complete,
            outcome=outcome,
            decisions=tuple(self.decisions),
        )


def _byte_constraint(var: str, domain: frozenset[int]) -> Constraint:
    if len(domain) == 1:
        return Eq(var, next(iter(domain)))
    lo, hi = min(domain), max(domain)
    if hi - lo + 1 == len(domain):
        return InRange(var, lo, hi)
    return InSet(var, domain)


class ConcreteTape:
    """Drives a decision program with real bytes, recording the trace."""

    __slots__ = ("data", "decisions", "events", "accessed")

    def __init__(self, data: bytes):
        self.data = data
        self.decisions: list[tuple[str, str]] = []
        self.events: list[Event] = []
        self.accessed: set[int] = set()

    def choose(
        self,
        site: str,
        pos: int,
        arms: Sequence[tuple[str, frozenset[int]]],
        default: str | None = None,
    ) -> str:
        if pos >= len(self.data):
            self.decisions.append((site, ABSENT))
            return ABSENT
        self.accessed.add(pos)
        byte = self.data[pos]
        label = default
        for arm_label, values in arms:
            if byte in values:
                label = arm_label
                break
        if label is None:
            raise RuntimeError(f"byte {byte:#x} outside arms at {site} and no default")
        self.decisions.append((site, label))
        return label

    def bind_varint(self, site: str, pos: int) -> tuple[str, int, int]:
        data, total = self.data, len(self.data)
        if pos >= total:
            self.decisions.append((site, ABSENT))
            return ABSENT, 0, 0
        value, shift = 0, 1
        for i in range(4):
            index = pos + i
            if index >= total:
                self.decisions.append((site, f"trunc{i + 1}"))
                return "trunc", 0, i + 1
            self.accessed.add(index)
            byte = data[index]
            value += (byte & 0x7F) * shift
            shift *= 128
            if not byte & 0x80:
                nbytes = i + 1
                if i > 0 and byte == 0:
                    self.decisions.append((site, f"min{nbytes}"))
                    return "min", 0, nbytes
                expected = pos + nbytes + value
                if total == expected:
                    relation = "eq"
                elif total < expected:
                    relation = "short"
                else:
                    relation = "long"
                if relation == "eq" and nbytes == 1:
                    label = f"eq1@{value}"
                else:
                    label = f"{relation}{nbytes}"
                self.decisions.append((site, label))
                return relation, value, nbytes
        self.decisions.append((site, "over5"))
        return "over", 0, 5

    def bind_u16(self, site: str, pos: int, budget: int) -> tuple[str, int]:
        self.accessed.update((pos, pos + 1))
        value = (self.data[pos] << 8) | self.data[pos + 1]
        if value <= budget:
            self.decisions.append((site, f"fit@{value}"))
            return "fit", value
        label = "over_hi" if self.data[pos] else "over_lo"
        self.decisions.append((site, label))
        return label, value

    def effect(self, label: str, detail: str = "") -> None:
        self.events.append(Event(label, detail))

    @property
    def path_id(self) -> str:
        return "-".join(label for _, label in self.decisions)


@dataclass(frozen=True, slots=True)
class ExploreConfig:
    depth: int = 8
    budget_seconds: float = 60.0
    max_paths: int = 4096


@dataclass(frozen=True, slots=True)
class ExplorationResult:
    paths: tuple[PathCondition, ...]
    truncated: bool
    nodes_run: int
    elapsed_seconds: float


def explore_paths(
    model: ParserProgram, init: SymbolicPacket, config: ExploreConfig
) -> ExplorationResult:
    """Enumerate feasible branch outcomes breadth-first up to the depth bound."""
    started = time.monotonic()
    deadline = started + config.budget_seconds
    if config.budget_seconds <= 0:
        return ExplorationResult(paths=(), truncated=True, nodes_run=0, elapsed_seconds=0.0)
    paths: list[PathCondition] = []
    truncated = False
    nodes = 0
    worklist: deque[list[str]] = deque([[]])
    while worklist:
        if time.monotonic() > deadline or len(paths) >= config.max_paths:
            truncated = True
            break
        prefix = worklist.popleft()
        tape = SymbolicTape(init, prefix)
        nodes += 1
        try:
            outcome = model.run(tape)
        except _Frontier as frontier:
            if len(prefix) >= config.depth:
                paths.append(tape.path_condition(complete=False, outcome=None))
                truncated = True
            else:
                for label in frontier.outcomes:
                    worklist.append(prefix + [label])
            continue
        paths.append(tape.path_condition(complete=True, outcome=outcome))
    return ExplorationResult(
        paths=tuple(paths),
        truncated=truncated,
        nodes_run=nodes,
        elapsed_seconds=time.monotonic() - started,
    )


UNSAT = None


def solve_condition(pc: PathCondition, packet: SymbolicPacket) -> bytes | None:
    """Lexicographically smallest assignment satisfying ``pc``, or None (UNSAT)."""
    positions = packet.var_positions()
    domains = packet.initial_domains()
    len_lo, len_hi = packet.length_bounds()
    for constraint in pc.constraints:
        if isinstance(constraint, (LenEq, LenLe, LenGe)):
            if packet.length_var is None or constraint.var != packet.length_var:
                raise ValueError(f"unknown length var {constraint.var!r}")
            if isinstance(constraint, LenEq):
                len_lo = max(len_lo, constraint.value)
                len_hi = min(len_hi, constraint.value)
            elif isinstance(constraint, LenLe):
                len_hi = min(len_hi, constraint.value)
            else:
                len_lo = max(len_lo, constraint.value)
            continue
        pos = positions.get(constraint.var)
        if pos is None:
            raise ValueError(f"unknown var {constraint.var!r}")
        if isinstance(constraint, Eq):
            allowed: frozenset[int] = frozenset((constraint.value,))
        elif isinstance(constraint, InSet):
            allowed = constraint.values
        else:
            allowed = frozenset(range(constraint.lo, constraint.hi + 1))
        domains[pos] &= allowed
        if not domains[pos]:
            return UNSAT
    if len_lo > len_hi:
        return UNSAT
    return bytes(min(domains[pos]) for pos in range(len_lo))


@dataclass(frozen=True, slots=True)
class SafetyCheckResult:
    findings: tuple[SafetyFinding, ...]
    non_reproducible: tuple[SafetyFinding, ...]


def check_safety(
    model: ParserProgram,
    pc: PathCondition,
    packet: SymbolicPacket,
    properties: frozenset[FindingKind] = ALL_FINDING_KINDS,
) -> SafetyCheckResult:
    """Run the witness of ``pc`` with safety monitors armed.

    Violations whose concrete replay through the real target does not
    reproduce the same kind are reported separately, never as findings.
    """
    witness = solve_condition(pc, packet)
    if witness is None:
        raise ValueError("path condition is unsatisfiable")
    tape = ConcreteTape(witness)
    model.run(tape)
    violations = _monitor(tape, properties)
    findings: list[SafetyFinding] = []
    non_reproducible: list[SafetyFinding] = []
    for kind, trace in violations:
        finding = SafetyFinding(kind=kind, trace=trace, witness=witness, path=pc)
        if model.concrete_check(witness) == kind.value:
            findings.append(finding)
        else:
            non_reproducible.append(finding)
    return SafetyCheckResult(
        findings=tuple(findings), non_reproducible=tuple(non_reproducible)
    )


def _monitor(
    tape: ConcreteTape, properties: frozenset[FindingKind]
) -> list[tuple[FindingKind, tuple[tuple[str, str], ...]]]:
    violations = []
    trace: list[tuple[str, str]] = []
    ledger: dict[str, int] = {}
    for event in tape.events:
        trace.append((event.label, event.detail))
        if event.label == "acquire":
            ledger[event.detail] = ledger.get(event.detail, 0) + 1
        elif event.label == "release":
            ledger[event.detail] = ledger.get(event.detail, 0) - 1
        elif event.label == "release_handle" and event.detail == ABSENT:
            if FindingKind.ABSENT_HANDLE_RELEASE in properties:
                violations.append((FindingKind.ABSENT_HANDLE_RELEASE, tuple(trace)))
        elif event.label == "bounds_copy":
            if FindingKind.INDEX_OUT_OF_BOUNDS in properties:
                violations.append((FindingKind.INDEX_OUT_OF_BOUNDS, tuple(trace)))
        elif event.label == "assert_fail":
            if FindingKind.ASSERTION_VIOLATION in properties:
                violations.append((FindingKind.ASSERTION_VIOLATION, tuple(trace)))
    leaked = {site: n for site, n in ledger.items() if n != 0}
    if leaked and FindingKind.RESOURCE_LEAK in properties:
        detail = ",".join(f"{site}:{n}" for site, n in sorted(leaked.items()))
        trace.append(("teardown_imbalance", detail))
        violations.append((FindingKind.RESOURCE_LEAK, tuple(trace)))
    return violations


def emit_seeds(
    paths: Iterable[PathCondition], packet: SymbolicPacket, out_dir: str
) -> SeedCorpus:
    """Solve each path to a concrete frame and write the deduplicated corpus."""
    rows: list[tuple[str, bytes, str, int, Provenance]] = []
    seen: set[bytes] = set()
    for pc in paths:
        witness = solve_condition(pc, packet)
        if witness is None:
            raise ValueError(f"unsatisfiable path {pc.path_id!r}")
        if witness in seen:
            continue
        seen.add(witness)
        rows.append((_seed_filename(pc.path_id), witness, pc.path_id, pc.depth, Provenance.BMC))
    return save_corpus(out_dir, rows)


def _seed_filename(path_id: str) -> str:
    safe = path_id.replace("@", "_")
    if len(safe) <= 80:
        return f"bmc-{safe or 'entry'}.bin"
    digest = hashlib.sha256(path_id.encode()).hexdigest()[:12]
    return f"bmc-{safe[:64]}-{digest}.bin"


def brute_force_paths(
    model: ParserProgram, max_len: int, pruned: bool = True
) -> dict[str, bytes]:
    """Ground-truth path set: run every frame of length 1..max_len concretely.

    Returns each distinct decision sequence with the smallest input that
    produces it.  With ``pruned`` the enumeration skips assignments of byte
    positions the program never accessed; because programs only see bytes
    through the tape, unaccessed positions cannot change the trace, so the
    result is identical to the unpruned sweep (cross-checked in tests).
    """
    paths: dict[str, bytes] = {}

    def record(data: bytes) -> set[int]:
        tape = ConcreteTape(data)
        model.run(tape)
        paths.setdefault(tape.path_id, data)
        return tape.accessed

    for length in range(1, max_len + 1):
        if not pruned:
            for value in range(256**length):
                record(value.to_bytes(length, "big"))
            continue

        def descend(prefix: bytearray, index: int, length: int = length) -> None:
            tail = length - index - 1
            for value in range(256):
                prefix[index] = value
                accessed = record(bytes(prefix[: index + 1]) + bytes(tail))
                beyond = bool(accessed) and max(accessed) > index
                if beyond and tail:
                    descend(prefix, index + 1)
                if index not in accessed and not beyond:
                    # Nothing at or past this position was read: every other
                    # value here produces the identical trace.
                    break
            prefix[index] = 0

        descend(bytearray(length), 0)
    return paths
