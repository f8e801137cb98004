"""Coverage-guided mutation fuzzer primitives.

Edge coverage uses the classic xor-shift bitmap scheme: each probe visit
forms an edge index ``(current ^ (previous >> 1)) mod 65536`` and hit
counts are bucketed into eight classes for novelty comparison.  The run
map is sparse (a dict of touched edges) because a typical execution
touches a few dozen edges out of 65,536; the global map keeps one
bucket-class bitmask byte per edge and only ever gains coverage.

Mutation operators are total functions over byte strings: out-of-range
offsets degrade to no-ops, and every operator is deterministic given its
parameters (Havoc carries its own RNG seed).  ``mutate_encrypted``
realizes key-aware mutation: open a sealed record with keys from the key
log, mutate the plaintext, and re-seal at the same sequence number so the
receiving endpoint still authenticates it.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass, field
from itertools import accumulate

from . import secure_channel as sc
from .corpus import Provenance

MAP_SIZE = 65536
MAX_INPUT = 65536

HAVOC_WEIGHT = 0.5
BASE_ENERGY = 2.0
ENERGY_FLOOR = 1.0

INTERESTING_BYTES = (0x00, 0xFF, 0x7F, 0x80)


class NoKeys(LookupError):
    """Key log has no entry for the record's session."""


class OpenFailed(ValueError):
    """Record was already invalid before mutation."""


@dataclass(slots=True)
class Seed:
    data: bytes
    provenance: Provenance
    exec_count: int = 0
    found_new_coverage: bool = False
    energy: float = BASE_ENERGY

    def __post_init__(self) -> None:
        if len(self.data) > MAX_INPUT:
            raise ValueError("seed exceeds 64 KiB")


def seed_energy(seed: Seed) -> float:
    """Scheduling weight: doubled for coverage finders, halved per 100 execs."""
    energy = BASE_ENERGY * (2.0 if seed.found_new_coverage else 1.0)
    energy *= 0.5 ** (seed.exec_count // 100)
    return max(ENERGY_FLOOR, energy)


class CoverageMap:
    """Per-execution edge counters fed by probe visits."""

    __slots__ = ("counts", "_prev")

    def __init__(self) -> None:
        self.counts: dict[int, int] = {}
        self._prev: int | None = None

    def visit(self, probe: int) -> None:
        prev = self._prev
        if prev is not None:
            edge = (probe ^ (prev >> 1)) & 0xFFFF
            current = self.counts.get(edge, 0)
            if current < 255:
                self.counts[edge] = current + 1
        self._prev = probe

    def reset(self) -> None:
        self.counts.clear()
        self._prev = None


def bucket_class(count: int) -> int:
    """Hit-count novelty class: {1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128+}."""
    if count <= 3:
        return count - 1
    if count <= 7:
        return 3
    if count <= 15:
        return 4
    if count <= 31:
        return 5
    if count <= 127:
        return 6
    return 7


class GlobalCoverage:
    """Accumulated (edge, bucket-class) set over a campaign; only grows."""

    __slots__ = ("masks", "buckets_hit")

    def __init__(self) -> None:
        self.masks = bytearray(MAP_SIZE)
        self.buckets_hit = 0

    def edges_hit(self) -> int:
        return sum(1 for m in self.masks if m)


def record_execution(global_map: GlobalCoverage, run: CoverageMap) -> int:
    """Merge one run into the global map; returns the count of new
    (edge, bucket-class) pairs."""
    delta = 0
    masks = global_map.masks
    for edge, count in run.counts.items():
        bit = 1 << bucket_class(count)
        if not masks[edge] & bit:
            masks[edge] |= bit
            delta += 1
    global_map.buckets_hit += delta
    return delta


# ---------------------------------------------------------------------------
# Mutation operators.
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class BitFlip:
    bit: int


@dataclass(frozen=True, slots=True)
class ByteSet:
    offset: int
    value: int


@dataclass(frozen=True, slots=True)
class Arith:
    offset: int
    delta: int  # in +-1..+-35


@dataclass(frozen=True, slots=True)
class InterestingValue:
    offset: int
    value: int  # one of INTERESTING_BYTES


@dataclass(frozen=True, slots=True)
class Truncate:
    new_len: int


@dataclass(frozen=True, slots=True)
class Extend:
    pad_len: int
    pad_byte: int


@dataclass(frozen=True, slots=True)
class LengthFieldCorrupt:
    new_varint: bytes


@dataclass(frozen=True, slots=True)
class Splice:
    other: bytes
    self_cut: int
    other_cut: int


@dataclass(frozen=True, slots=True)
class Havoc:
    n: int
    seed: int


MutationOp = (
    BitFlip
    | ByteSet
    | Arith
    | InterestingValue
    | Truncate
    | Extend
    | LengthFieldCorrupt
    | Splice
    | Havoc
)


def mutate(data: bytes, op: MutationOp) -> bytes:
    """Apply one operator; total on any byte string, output <= 64 KiB."""
    if isinstance(op, BitFlip):
        index = op.bit >> 3
        if index >= len(data):
            return data
        out = bytearray(data)
        out[index] ^= 1 << (op.bit & 7)
        return bytes(out)
    if isinstance(op, ByteSet):
        if op.offset >= len(data):
            return data
        out = bytearray(data)
        out[op.offset] = op.value & 0xFF
        return bytes(out)
    if isinstance(op, Arith):
        if op.offset >= len(data):
            return data
        out = bytearray(data)
        out[op.offset] = (out[op.offset] + op.delta) & 0xFF
        return bytes(out)
    if isinstance(op, InterestingValue):
        if op.offset >= len(data):
            return data
        out = bytearray(data)
        out[op.offset] = op.value & 0xFF
        return bytes(out)
    if isinstance(op, Truncate):
        if op.new_len >= len(data):
            return data
        return data[: max(0, op.new_len)]
    if isinstance(op, Extend):
        pad = max(0, op.pad_len)
        return (data + bytes((op.pad_byte & 0xFF,)) * pad)[:MAX_INPUT]
    if isinstance(op, LengthFieldCorrupt):
        return _corrupt_length_field(data, op.new_varint)
    if isinstance(op, Splice):
        cut_self = min(max(0, op.self_cut), len(data))
        cut_other = min(max(0, op.other_cut), len(op.other))
        return (data[:cut_self] + op.other[cut_other:])[:MAX_INPUT]
    return _havoc(data, op)


def _corrupt_length_field(data: bytes, new_varint: bytes) -> bytes:
    if len(data) < 2:
        return data
    # Locate the existing remaining-length span (lenient: up to 4 bytes,
    # stopping at the first byte without a continuation bit).
    end = 2
    for i in range(1, min(5, len(data))):
        end = i + 1
        if not data[i] & 0x80:
            break
    return (data[:1] + new_varint + data[end:])[:MAX_INPUT]


def _havoc(data: bytes, op: Havoc) -> bytes:
    rng = random.Random(op.seed)
    for _ in range(op.n):
        data = mutate(data, _draw_simple_op(rng, len(data)))
    return data


def _build_op(rng: random.Random, kind: int, length: int) -> MutationOp:
    span = max(1, length)
    if kind == 0:
        return BitFlip(bit=rng.randrange(span * 8))
    if kind == 1:
        return ByteSet(offset=rng.randrange(span), value=rng.randrange(256))
    if kind == 2:
        delta = rng.randrange(1, 36)
        return Arith(offset=rng.randrange(span), delta=delta if rng.random() < 0.5 else -delta)
    if kind == 3:
        return InterestingValue(offset=rng.randrange(span), value=rng.choice(INTERESTING_BYTES))
    if kind == 4:
        return Truncate(new_len=rng.randrange(span))
    if kind == 5:
        return Extend(pad_len=rng.randrange(1, 16), pad_byte=rng.randrange(256))
    return LengthFieldCorrupt(new_varint=_random_varint(rng))


def _draw_simple_op(rng: random.Random, length: int) -> MutationOp:
    return _build_op(rng, rng.randrange(7), length)


def _random_varint(rng: random.Random) -> bytes:
    width = rng.choice((1, 1, 2, 2, 3, 4))
    out = bytearray(rng.randrange(0x80, 0x100) for _ in range(width - 1))
    out.append(rng.randrange(0x80))
    return bytes(out)


def draw_op(rng: random.Random, seed: Seed, queue: list[Seed]) -> MutationOp:
    """Operator schedule: Havoc half the time, the catalog uniformly otherwise."""
    if rng.random() < HAVOC_WEIGHT:
        return Havoc(n=rng.choice((1, 2, 4, 8)), seed=rng.getrandbits(32))
    kind = rng.randrange(8)
    if kind == 7:
        partner = rng.choice(queue)
        return Splice(
            other=partner.data,
            self_cut=rng.randrange(max(1, len(seed.data))),
            other_cut=rng.randrange(max(1, len(partner.data))),
        )
    return _build_op(rng, kind, len(seed.data))


class EmptyQueue(RuntimeError):
    pass


def select_next_seed(queue: list[Seed], rng: random.Random) -> tuple[Seed, MutationOp]:
    """Energy-weighted seed choice plus an operator draw."""
    if not queue:
        raise EmptyQueue("seed queue is empty")
    weights = [seed_energy(s) for s in queue]
    seed = rng.choices(queue, cum_weights=list(accumulate(weights)), k=1)[0]
    return seed, draw_op(rng, seed, queue)


def mutate_encrypted(
    record: sc.Record, keylog: sc.KeyLog, op: MutationOp
) -> sc.Record:
    """Decrypt with logged keys, mutate the plaintext, re-seal in place.

    The re-sealed record keeps the original direction key and sequence
    number, so the receiving endpoint authenticates it and sees the mutated
    plaintext.
    """
    keys = keylog.keys_for(record.session_id)
    if keys is None:
        raise NoKeys(f"session {record.session_id.hex()} not in key log")
    try:
        plaintext = sc.decrypt_record(keys, record)
    except sc.AuthFailure as exc:
        raise OpenFailed("record does not authenticate; cannot mutate") from exc
    return sc.seal_at(keys, record.direction, record.seq, mutate(plaintext, op))


class Fuzzer:
    """Seed queue plus campaign coverage state.

    Selection semantics are identical to :func:`select_next_seed`; the
    cumulative energy weights are just cached between queue changes.
    """

    def __init__(self, seeds: list[Seed], rng: random.Random):
        if not seeds:
            raise EmptyQueue("cannot start with an empty queue")
        self.queue: list[Seed] = list(seeds)
        self.rng = rng
        self.coverage = GlobalCoverage()
        self.execs = 0
        self._cum_weights: list[float] | None = None
        self._known: set[bytes] = {s.data for s in self.queue}

    def _weights(self) -> list[float]:
        if self._cum_weights is None:
            self._cum_weights = list(accumulate(seed_energy(s) for s in self.queue))
        return self._cum_weights

    def select(self) -> tuple[Seed, MutationOp]:
        seed = self.rng.choices(self.queue, cum_weights=self._weights(), k=1)[0]
        return seed, draw_op(self.rng, seed, self.queue)

    def record_result(self, seed: Seed, data: bytes, run: CoverageMap) -> int:
        """Merge coverage, update scheduling state, admit novel mutants."""
        delta = record_execution(self.coverage, run)
        self.execs += 1
        seed.exec_count += 1
        if seed.exec_count % 100 == 0:
            self._cum_weights = None
        seed.energy = seed_energy(seed)
        if delta > 0:
            if not seed.found_new_coverage:
                seed.found_new_coverage = True
                self._cum_weights = None
            if data != seed.data and data not in self._known and len(data) <= MAX_INPUT:
                mutant = Seed(
                    data=data, provenance=Provenance.MUTATED, found_new_coverage=True
                )
                mutant.energy = seed_energy(mutant)
                self.queue.append(mutant)
                self._known.add(data)
                self._cum_weights = None
        return delta


def write_crash_artifact(
    directory: str, data: bytes, sidecar: dict
) -> tuple[str, str]:
    """Write ``crash-<hash>.bin`` plus its JSON sidecar; returns both paths."""
    os.makedirs(directory, exist_ok=True)
    digest = hashlib.sha256(data).hexdigest()[:16]
    bin_path = os.path.join(directory, f"crash-{digest}.bin")
    json_path = os.path.join(directory, f"crash-{digest}.json")
    with open(bin_path, "wb") as fh:
        fh.write(data)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    return bin_path, json_path
