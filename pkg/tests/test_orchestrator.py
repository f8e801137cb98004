"""Pipeline tests: seed handoff, verdict classification, reports, campaigns."""

from __future__ import annotations

import json
import os

import pytest

from ebf import bmc_engine as bmc
from ebf import fuzz_engine as fz
from ebf import mqtt_codec as mc
from ebf import orchestrator as orch
from ebf import secure_channel as sc
from ebf import target_suite as ts
from ebf.corpus import Provenance, save_corpus


def campaign_config(tmp_path, bugs=frozenset(), **fuzz_kwargs) -> orch.CampaignConfig:
    fuzz_defaults = dict(budget_seconds=60.0, max_execs=3000, rng_seed=1)
    fuzz_defaults.update(fuzz_kwargs)
    return orch.CampaignConfig(
        target=ts.TargetConfig(enabled_bugs=frozenset(bugs)),
        paths=orch.CampaignPaths.under(str(tmp_path / "out")),
        bmc=orch.BmcPhaseConfig(budget_seconds=30.0),
        fuzz=orch.FuzzPhaseConfig(**fuzz_defaults),
    )


def test_convert_seeds_order_and_dedup(tmp_path):
    corpus = save_corpus(
        str(tmp_path / "c"),
        [
            ("a.bin", b"\x10\x00", "p1", 5, Provenance.BMC),
            ("b.bin", b"\xc0\x00", "p2", 1, Provenance.BMC),
            ("c.bin", b"\xe0\x00", "p3", 3, Provenance.BMC),
        ],
    )
    server_frames = [b"\x20\x02\x00\x00", b"\xc0\x00"]  # one duplicates a seed
    queue = orch.convert_seeds(corpus, server_frames)
    assert len(queue) == 4
    assert [s.data for s in queue[:3]] == [b"\xc0\x00", b"\xe0\x00", b"\x10\x00"]
    assert queue[3].provenance is Provenance.SERVER_GENERATED


def test_convert_seeds_empty_corpus(tmp_path):
    corpus = save_corpus(str(tmp_path / "c"), [])
    queue = orch.convert_seeds(corpus, [b"\x20\x02\x00\x00"])
    assert len(queue) == 1
    assert queue[0].provenance is Provenance.SERVER_GENERATED


def test_server_generated_frames(tmp_path):
    frames = orch.server_generated_frames(campaign_config(tmp_path))
    decoded = [mc.decode_packet(f) for f in frames]
    assert mc.Connack(False, 0) in decoded
    assert any(isinstance(p, mc.Suback) for p in decoded)
    assert any(isinstance(p, mc.Puback) for p in decoded)
    assert mc.Pingresp() in decoded
    assert mc.Disconnect() in decoded


def test_classify_trapped_crash_wins():
    crash = ts.Verdict.crash(bmc.FindingKind.ASSERTION_VIOLATION, "x", ())
    out = orch.classify_verdict(crash, 9_999.0, 500.0)
    assert out is crash


def test_classify_hang_threshold():
    out = orch.classify_verdict(ts.Verdict.ok(), 600.0, 500.0)
    assert out.kind is ts.VerdictKind.HANG
    out = orch.classify_verdict(ts.Verdict.ok(), 400.0, 500.0)
    assert out.kind is ts.VerdictKind.OK


def test_classify_teardown_leak():
    ledger = ts.AllocLedger()
    for _ in range(3):
        ledger.acquire("m")
    ledger.release("m")
    ledger.release("m")
    leak = ts.Verdict.leak("m", ledger.imbalance()["m"])
    out = orch.classify_verdict(ts.Verdict.ok(), 1.0, 500.0, teardown=leak)
    assert out.kind is ts.VerdictKind.LEAK_DETECTED
    assert out.leak_net == 1


def test_classify_response_violation():
    out = orch.classify_verdict(
        ts.Verdict.ok(), 1.0, 500.0, violation="expected Connack, got pingresp"
    )
    assert out.kind is ts.VerdictKind.PROTOCOL_VIOLATION


def test_response_violation_rules():
    connect = mc.Connect(protocol_name="MQTT")
    assert orch.response_violation(connect, ts.Phase.FRESH, None) is not None
    assert (
        orch.response_violation(
            connect, ts.Phase.FRESH, mc.encode_packet(mc.Connack(False, 0))
        )
        is None
    )
    assert (
        orch.response_violation(
            connect, ts.Phase.FRESH, mc.encode_packet(mc.Pingresp())
        )
        is not None
    )
    err = mc.decode_packet(b"\x00\x00")
    assert orch.response_violation(err, ts.Phase.FRESH, None) is None


def test_finding_id_stable():
    a = orch.finding_id("resource_leak", b"\x10\x00", "none")
    b = orch.finding_id("resource_leak", b"\x10\x00", "none")
    assert a == b and len(a) == 16
    assert a != orch.finding_id("resource_leak", b"\x10\x00", "connect")
    assert a != orch.finding_id("hang", b"\x10\x00", "none")


def test_bmc_phase_v1_finding_trace(tmp_path):
    config = campaign_config(tmp_path, bugs={ts.Bug.V1_ABSENT_HANDLE_RELEASE})
    result = orch.run_bmc_phase(config)
    kinds = {f.kind for f in result.findings}
    assert "absent_handle_release" in kinds
    finding = next(f for f in result.findings if f.kind == "absent_handle_release")
    assert finding.trace[-1].startswith("release_handle")
    assert finding.phase == "bmc"
    assert os.path.exists(finding.reproducer_file)
    assert result.non_reproducible == 0


def test_bmc_phase_clean_target_no_findings(tmp_path):
    result = orch.run_bmc_phase(campaign_config(tmp_path))
    assert result.findings == ()
    assert len(result.corpus.entries) > 100


def test_report_write_parse_round_trip(tmp_path):
    config = campaign_config(tmp_path)
    report = orch.run_campaign(config)
    loaded = orch.load_report(config.paths.report_path)
    assert loaded == report.to_json()
    assert loaded["findings"] == []  # present even when empty


def test_report_matches_published_schema(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    config = campaign_config(tmp_path, bugs={ts.Bug.V1_ABSENT_HANDLE_RELEASE})
    report = orch.run_campaign(config)
    schema_path = os.path.join(os.path.dirname(orch.__file__), "report_schema.json")
    with open(schema_path) as fh:
        schema = json.load(fh)
    jsonschema.validate(report.to_json(), schema)


def test_campaign_findings_sorted(tmp_path):
    config = campaign_config(tmp_path, bugs=set(ts.ALL_BUGS), max_execs=20_000)
    report = orch.run_campaign(config)
    keys = [(f.phase, f.first_seen) for f in report.findings]
    assert keys == sorted(keys)
    assert any(f.phase == "bmc" for f in report.findings)


def test_campaign_determinism(tmp_path):
    first = orch.run_campaign(campaign_config(tmp_path / "a", bugs={ts.Bug.V2_INDEX_OUT_OF_BOUNDS}))
    second = orch.run_campaign(campaign_config(tmp_path / "b", bugs={ts.Bug.V2_INDEX_OUT_OF_BOUNDS}))
    a, b = first.to_json(), second.to_json()
    a["config"]["paths"] = b["config"]["paths"] = {}
    for f in a["findings"] + b["findings"] + a["bmc"]["findings"] + b["bmc"]["findings"] + a["fuzz"]["findings"] + b["fuzz"]["findings"]:
        f["reproducer_file"] = os.path.basename(f["reproducer_file"])
    assert orch.strip_timing(a) == orch.strip_timing(b)


def test_keylog_failure_aborts_aware_campaign(tmp_path):
    config = campaign_config(tmp_path)
    os.makedirs(config.paths.keylog_path)  # a directory: unwritable as a file
    seeds = [fz.Seed(data=b"\xc0\x00", provenance=Provenance.BMC)]
    with pytest.raises(sc.KeyLogError):
        orch.run_fuzz_phase(config, seeds)


def test_keylog_failure_tolerated_in_blind_mode(tmp_path):
    config = campaign_config(tmp_path, mode="blind", max_execs=200)
    os.makedirs(config.paths.keylog_path)
    seeds = [fz.Seed(data=b"\xc0\x00", provenance=Provenance.BMC)]
    result = orch.run_fuzz_phase(config, seeds)
    assert result.stats.execs == 200


def test_fuzz_phase_blind_rejects_everything(tmp_path):
    config = campaign_config(tmp_path, mode="blind", max_execs=500)
    seeds = [fz.Seed(data=mc.encode_packet(mc.Pingreq()), provenance=Provenance.BMC)]
    result = orch.run_fuzz_phase(config, seeds)
    assert result.stats.rejected_records == 500
    assert result.stats.coverage_buckets == 0
    assert result.findings == ()


def test_fuzz_phase_finds_v1_from_seed(tmp_path):
    config = campaign_config(tmp_path, bugs={ts.Bug.V1_ABSENT_HANDLE_RELEASE}, max_execs=4000)
    seeds = [
        fz.Seed(data=mc.encode_packet(mc.Disconnect()), provenance=Provenance.BMC),
        fz.Seed(data=mc.encode_packet(mc.Pingreq()), provenance=Provenance.BMC),
    ]
    result = orch.run_fuzz_phase(config, seeds)
    kinds = {f.kind for f in result.findings}
    assert "absent_handle_release" in kinds
    finding = next(f for f in result.findings if f.kind == "absent_handle_release")
    sidecar_path = os.path.splitext(finding.reproducer_file)[0] + ".json"
    sidecar = json.load(open(sidecar_path))
    assert sidecar["verdict"] == "absent_handle_release"
    assert sidecar["enabled_bugs"] == ["V1"]
    assert "op_log" in sidecar


def test_fuzz_phase_progress_callback(tmp_path):
    config = campaign_config(tmp_path, max_execs=300)
    seeds = [fz.Seed(data=b"\xc0\x00", provenance=Provenance.BMC)]
    snapshots = []
    orch.run_fuzz_phase(config, seeds, progress=snapshots.append)
    assert snapshots
    assert snapshots[-1].execs == 300


def test_random_seeds_deterministic():
    import random

    a = orch.random_seeds(10, random.Random(5))
    b = orch.random_seeds(10, random.Random(5))
    assert [s.data for s in a] == [s.data for s in b]
    assert len({s.data for s in a}) == 10


def test_tcp_fuzz_phase_smoke(tmp_path):
    config = campaign_config(tmp_path, bugs={ts.Bug.V1_ABSENT_HANDLE_RELEASE}, max_execs=60)
    seeds = [
        fz.Seed(data=mc.encode_packet(mc.Disconnect()), provenance=Provenance.BMC),
    ]
    result = orch.run_fuzz_phase_tcp(config, seeds)
    assert result.stats.execs == 60
    assert {f.kind for f in result.findings} == {"absent_handle_release"}


def test_write_report_failure(tmp_path):
    report = orch.CampaignReport(config={}, bmc_phase={}, fuzz_phase={}, findings=())
    target = tmp_path / "dir-not-file"
    target.mkdir()
    with pytest.raises(orch.ReportError):
        orch.write_report(report, str(target))
