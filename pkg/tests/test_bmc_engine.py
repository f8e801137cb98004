"""Engine tests on small toy decision programs."""

from __future__ import annotations

import pytest

from ebf import bmc_engine as bmc


def fs(*values: int) -> frozenset[int]:
    return frozenset(values)


def dispatch_program() -> bmc.ParserProgram:
    """One dispatch decision over byte 0 with a default arm."""

    def run(tape: bmc.Tape) -> str:
        return tape.choose(
            "dispatch",
            0,
            [("connect", fs(0x10)), ("publish", fs(0x30)), ("ping", fs(0xC0))],
            default="other",
        )

    return bmc.ParserProgram(name="dispatch", run=run, concrete_check=lambda data: None)


def length_program() -> bmc.ParserProgram:
    """Dispatch, then a declared-length varint comparison."""

    def run(tape: bmc.Tape) -> str:
        arm = tape.choose("dispatch", 0, [("a", fs(0x01))], default="junk")
        if arm != "a":
            return f"out:{arm}"
        status, value, _ = tape.bind_varint("decl", 1)
        if status != "eq":
            return f"out:{status}"
        tape.effect("note", f"body {value}")
        return f"out:ok{value}"

    return bmc.ParserProgram(name="length", run=run, concrete_check=lambda data: None)


def release_program() -> bmc.ParserProgram:
    """Unguarded release on one arm, mirrored by the concrete check."""

    def run(tape: bmc.Tape) -> str:
        arm = tape.choose("d", 0, [("disc", fs(0xE0))], default="other")
        if arm == "disc":
            tape.effect("dispatch", "disconnect")
            tape.effect("release_handle", "absent")
            return "crash"
        return "ok"

    def concrete_check(data: bytes) -> str | None:
        if data and data[0] == 0xE0:
            return bmc.FindingKind.ABSENT_HANDLE_RELEASE.value
        return None

    return bmc.ParserProgram(name="release", run=run, concrete_check=concrete_check)


def explore(program, size=2, depth=8, budget=30.0, max_paths=10_000):
    return bmc.explore_paths(
        program,
        bmc.SymbolicPacket.fully_symbolic(size),
        bmc.ExploreConfig(depth=depth, budget_seconds=budget, max_paths=max_paths),
    )


def test_single_dispatch_enumerates_four_paths():
    result = explore(dispatch_program(), size=1, depth=1)
    assert not result.truncated
    assert len(result.paths) == 4
    # Brute force over all 256 first bytes groups into the same arm set.
    program = dispatch_program()
    seen = set()
    for value in range(256):
        tape = bmc.ConcreteTape(bytes([value]))
        program.run(tape)
        seen.add(tape.path_id)
    assert seen == {pc.path_id for pc in result.paths}


def test_depth_zero_yields_single_entry_path():
    result = explore(dispatch_program(), size=1, depth=0)
    assert len(result.paths) == 1
    pc = result.paths[0]
    assert pc.depth == 0
    assert not pc.complete
    assert pc.constraints == ()
    assert result.truncated


def test_zero_budget_yields_nothing_truncated():
    result = bmc.explore_paths(
        dispatch_program(),
        bmc.SymbolicPacket.fully_symbolic(1),
        bmc.ExploreConfig(depth=4, budget_seconds=0.0),
    )
    assert result.paths == ()
    assert result.truncated


def test_max_paths_truncates():
    result = explore(length_program(), size=3, max_paths=2)
    assert len(result.paths) == 2
    assert result.truncated


def test_witnesses_replay_their_paths():
    program = length_program()
    packet = bmc.SymbolicPacket.fully_symbolic(3)
    result = explore(program, size=3, depth=16)
    assert not result.truncated
    for pc in result.paths:
        witness = bmc.solve_condition(pc, packet)
        assert witness is not None
        tape = bmc.ConcreteTape(witness)
        program.run(tape)
        assert tape.path_id == pc.path_id


def test_bounded_completeness_small_oracle():
    program = length_program()
    truth = bmc.brute_force_paths(program, max_len=3)
    result = explore(program, size=3, depth=16)
    symbolic = {pc.path_id for pc in result.paths}
    assert symbolic == set(truth)
    # Witnesses agree with the smallest brute-force representative.
    packet = bmc.SymbolicPacket.fully_symbolic(3)
    for pc in result.paths:
        assert bmc.solve_condition(pc, packet) == truth[pc.path_id]


def test_brute_force_pruning_is_exact():
    program = length_program()
    assert bmc.brute_force_paths(program, 2, pruned=True) == bmc.brute_force_paths(
        program, 2, pruned=False
    )


def test_exploration_is_deterministic():
    first = explore(length_program(), size=3)
    second = explore(length_program(), size=3)
    assert [pc.path_id for pc in first.paths] == [pc.path_id for pc in second.paths]
    assert [pc.constraints for pc in first.paths] == [pc.constraints for pc in second.paths]


def test_solve_direct_assignment():
    packet = bmc.SymbolicPacket.fully_symbolic(3)
    pc = bmc.PathCondition(
        constraints=(bmc.Eq("b0", 0x10),), path_id="x", depth=1
    )
    assert bmc.solve_condition(pc, packet) == bytes([0x10])


def test_solve_contradiction_unsat():
    packet = bmc.SymbolicPacket.fully_symbolic(2)
    pc = bmc.PathCondition(
        constraints=(bmc.Eq("b0", 1), bmc.Eq("b0", 2)), path_id="x", depth=2
    )
    assert bmc.solve_condition(pc, packet) is None


def test_solve_range_and_length():
    packet = bmc.SymbolicPacket.fully_symbolic(6)
    pc = bmc.PathCondition(
        constraints=(bmc.InRange("b1", 0x61, 0x7A), bmc.LenEq("len", 4)),
        path_id="x",
        depth=2,
    )
    witness = bmc.solve_condition(pc, packet)
    assert witness == bytes([0x00, 0x61, 0x00, 0x00])
    # Confirm minimality by brute force over the bounded domain.
    smallest = min(
        bytes([0, b1, 0, 0]) for b1 in range(0x61, 0x7B)
    )
    assert witness == smallest


def test_solve_rejects_unknown_var():
    packet = bmc.SymbolicPacket.fully_symbolic(2)
    pc = bmc.PathCondition(constraints=(bmc.Eq("zz", 1),), path_id="x", depth=1)
    with pytest.raises(ValueError):
        bmc.solve_condition(pc, packet)


def test_check_safety_reports_confirmed_finding():
    program = release_program()
    packet = bmc.SymbolicPacket.fully_symbolic(2)
    result = explore(program, size=2)
    crash_paths = [pc for pc in result.paths if pc.outcome == "crash"]
    assert crash_paths
    check = bmc.check_safety(program, crash_paths[0], packet)
    assert len(check.findings) == 1
    finding = check.findings[0]
    assert finding.kind is bmc.FindingKind.ABSENT_HANDLE_RELEASE
    assert finding.trace[-1] == ("release_handle", "absent")
    assert finding.witness[0] == 0xE0
    assert check.non_reproducible == ()


def test_check_safety_non_reproducible_is_separate():
    base = release_program()
    # Ground truth that never confirms: every symbolic hit must be
    # quarantined instead of reported.
    program = bmc.ParserProgram(
        name="liar", run=base.run, concrete_check=lambda data: None
    )
    packet = bmc.SymbolicPacket.fully_symbolic(2)
    result = explore(program, size=2)
    crash_paths = [pc for pc in result.paths if pc.outcome == "crash"]
    check = bmc.check_safety(program, crash_paths[0], packet)
    assert check.findings == ()
    assert len(check.non_reproducible) == 1


def test_check_safety_leak_monitor():
    def run(tape: bmc.Tape) -> str:
        arm = tape.choose("d", 0, [("bad", fs(0x01))], default="good")
        tape.effect("acquire", "session")
        if arm == "good":
            tape.effect("release", "session")
            return "ok"
        return "leak"

    program = bmc.ParserProgram(
        name="leaky",
        run=run,
        concrete_check=lambda data: (
            bmc.FindingKind.RESOURCE_LEAK.value if data and data[0] == 1 else None
        ),
    )
    packet = bmc.SymbolicPacket.fully_symbolic(1)
    result = explore(program, size=1)
    leak_paths = [pc for pc in result.paths if pc.outcome == "leak"]
    check = bmc.check_safety(program, leak_paths[0], packet)
    assert [f.kind for f in check.findings] == [bmc.FindingKind.RESOURCE_LEAK]
    assert check.findings[0].trace[-1][0] == "teardown_imbalance"


def test_emit_seeds_dedup_and_manifest(tmp_path):
    program = dispatch_program()
    packet = bmc.SymbolicPacket.fully_symbolic(1)
    result = explore(program, size=1, depth=1)
    corpus = bmc.emit_seeds(result.paths, packet, str(tmp_path / "corpus"))
    assert len(corpus.entries) == 4
    contents = {corpus.read_seed(e) for e in corpus.entries}
    assert contents == {bytes([0x10]), bytes([0x30]), bytes([0xC0]), bytes([0x00])}
    # Two identical witnesses collapse to a single file.
    doubled = list(result.paths) + [result.paths[0]]
    corpus2 = bmc.emit_seeds(doubled, packet, str(tmp_path / "corpus2"))
    assert len(corpus2.entries) == 4


def test_emit_seeds_empty_paths(tmp_path):
    packet = bmc.SymbolicPacket.fully_symbolic(1)
    corpus = bmc.emit_seeds([], packet, str(tmp_path / "corpus"))
    assert corpus.entries == ()


def test_concrete_packet_positions_do_not_branch():
    packet = bmc.SymbolicPacket(
        layout=(bmc.Concrete(0x30), bmc.Symbolic("b1")), length_var=None
    )
    result = bmc.explore_paths(
        dispatch_program(), packet, bmc.ExploreConfig(depth=4, budget_seconds=10.0)
    )
    assert len(result.paths) == 1
    assert result.paths[0].outcome == "publish"
