"""Broker behavior, seeded bug triggers, and model/broker agreement."""

from __future__ import annotations

import random

import pytest

from conftest import random_frame, random_packet
from ebf import bmc_engine as bmc
from ebf import mqtt_codec as mc
from ebf import target_suite as ts


def config(*bugs: ts.Bug) -> ts.TargetConfig:
    return ts.TargetConfig(enabled_bugs=frozenset(bugs))


CONNECT = mc.Connect(protocol_name="MQTT", keep_alive=60, client_id="pub")
SUBSCRIBE_WILD = mc.Subscribe(packet_id=1, topic_filters=(("a/#", 0),))
V4_PUBLISH = mc.Publish(topic="a/b", qos=1, packet_id=7, dup=True, retain=True)


def connected_broker(*bugs: ts.Bug) -> ts.Broker:
    broker = ts.Broker(config(*bugs))
    _, verdict = broker.handle_frame(mc.encode_packet(CONNECT))
    assert verdict.kind is ts.VerdictKind.OK
    return broker


def test_pingreq_from_any_phase():
    for setup in (lambda: ts.Broker(config()), connected_broker):
        broker = setup()
        response, verdict = broker.handle_frame(mc.encode_packet(mc.Pingreq()))
        assert verdict.kind is ts.VerdictKind.OK
        assert mc.decode_packet(response) == mc.Pingresp()


def test_connect_flow():
    broker = ts.Broker(config())
    response, verdict = broker.handle_frame(mc.encode_packet(CONNECT))
    assert verdict.kind is ts.VerdictKind.OK
    assert mc.decode_packet(response) == mc.Connack(session_present=False, return_code=0)
    assert broker.phase is ts.Phase.CONNECTED
    # Second CONNECT on a live session is rejected.
    _, verdict = broker.handle_frame(mc.encode_packet(CONNECT))
    assert verdict.kind is ts.VerdictKind.GRACEFUL_REJECT


def test_publish_requires_connection():
    broker = ts.Broker(config())
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Publish(topic="t")))
    assert verdict.kind is ts.VerdictKind.GRACEFUL_REJECT
    assert verdict.detail == "not_connected"


def test_publish_qos1_gets_puback():
    broker = connected_broker()
    response, verdict = broker.handle_frame(
        mc.encode_packet(mc.Publish(topic="t", qos=1, packet_id=99))
    )
    assert verdict.kind is ts.VerdictKind.OK
    assert mc.decode_packet(response) == mc.Puback(packet_id=99)


def test_subscribe_then_suback():
    broker = connected_broker()
    response, verdict = broker.handle_frame(mc.encode_packet(SUBSCRIBE_WILD))
    assert verdict.kind is ts.VerdictKind.OK
    assert mc.decode_packet(response) == mc.Suback(packet_id=1, return_codes=(0,))
    assert broker.phase is ts.Phase.SUBSCRIBED


def test_disconnect_echo_and_reset():
    broker = connected_broker()
    response, verdict = broker.handle_frame(mc.encode_packet(mc.Disconnect()))
    assert verdict.kind is ts.VerdictKind.OK
    assert mc.decode_packet(response) == mc.Disconnect()
    assert broker.phase is ts.Phase.FRESH
    assert broker.finish().kind is ts.VerdictKind.OK


def test_garbage_is_graceful():
    broker = ts.Broker(config())
    _, verdict = broker.handle_frame(b"\x00\xff\xff")
    assert verdict.kind is ts.VerdictKind.GRACEFUL_REJECT


# -- seeded bugs -------------------------------------------------------------


def test_v1_fresh_disconnect_crashes():
    broker = ts.Broker(config(ts.Bug.V1_ABSENT_HANDLE_RELEASE))
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Disconnect()))
    assert verdict.kind is ts.VerdictKind.CRASH
    assert verdict.crash_kind is bmc.FindingKind.ABSENT_HANDLE_RELEASE
    assert verdict.probe_trace[-1] == "disconnect:release_message"


def test_v1_with_live_handle_survives():
    broker = connected_broker(ts.Bug.V1_ABSENT_HANDLE_RELEASE)
    broker.handle_frame(mc.encode_packet(mc.Publish(topic="t")))
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Disconnect()))
    assert verdict.kind is ts.VerdictKind.OK


def test_v2_long_topic_overflows():
    broker = connected_broker(ts.Bug.V2_INDEX_OUT_OF_BOUNDS)
    frame = mc.encode_packet(mc.Publish(topic="a" * 300))
    _, verdict = broker.handle_frame(frame)
    assert verdict.kind is ts.VerdictKind.CRASH
    assert verdict.crash_kind is bmc.FindingKind.INDEX_OUT_OF_BOUNDS
    assert "300" in verdict.detail


def test_v2_respects_buffer_boundary():
    broker = connected_broker(ts.Bug.V2_INDEX_OUT_OF_BOUNDS)
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Publish(topic="a" * 256)))
    assert verdict.kind is ts.VerdictKind.OK
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Publish(topic="a" * 257)))
    assert verdict.kind is ts.VerdictKind.CRASH


def test_v2_off_long_topics_are_fine():
    broker = connected_broker()
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Publish(topic="a" * 2000)))
    assert verdict.kind is ts.VerdictKind.OK


def test_v3_bad_connect_leaks():
    broker = ts.Broker(config(ts.Bug.V3_RESOURCE_LEAK))
    _, verdict = broker.handle_frame(mc.encode_packet(mc.Connect(protocol_name="BAD")))
    assert verdict.kind is ts.VerdictKind.GRACEFUL_REJECT
    teardown = broker.finish()
    assert teardown.kind is ts.VerdictKind.LEAK_DETECTED
    assert teardown.leak_site == "session"
    assert teardown.leak_net == 1


def test_v3_off_bad_connect_balances():
    broker = ts.Broker(config())
    broker.handle_frame(mc.encode_packet(mc.Connect(protocol_name="BAD")))
    assert broker.finish().kind is ts.VerdictKind.OK


def test_v4_exact_trigger():
    broker = connected_broker(ts.Bug.V4_DEEP_STATEFUL)
    broker.handle_frame(mc.encode_packet(SUBSCRIBE_WILD))
    _, verdict = broker.handle_frame(mc.encode_packet(V4_PUBLISH))
    assert verdict.kind is ts.VerdictKind.CRASH
    assert verdict.crash_kind is bmc.FindingKind.ASSERTION_VIOLATION


@pytest.mark.parametrize(
    "packet",
    [
        mc.Publish(topic="a/b", qos=1, packet_id=7, dup=True),  # no retain
        mc.Publish(topic="a/b", qos=1, packet_id=7, retain=True),  # no dup
        mc.Publish(topic="a/b", qos=0, dup=True, retain=True),  # wrong qos
        mc.Publish(topic="x", qos=1, packet_id=7, dup=True, retain=True),  # no match
    ],
)
def test_v4_near_misses_survive(packet):
    broker = connected_broker(ts.Bug.V4_DEEP_STATEFUL)
    broker.handle_frame(mc.encode_packet(SUBSCRIBE_WILD))
    _, verdict = broker.handle_frame(mc.encode_packet(packet))
    assert verdict.kind is ts.VerdictKind.OK


def test_v4_needs_subscription_state():
    broker = connected_broker(ts.Bug.V4_DEEP_STATEFUL)
    _, verdict = broker.handle_frame(mc.encode_packet(V4_PUBLISH))
    assert verdict.kind is ts.VerdictKind.OK


def test_bug_independence():
    trigger_frames = {
        ts.Bug.V1_ABSENT_HANDLE_RELEASE: [mc.Disconnect()],
        ts.Bug.V2_INDEX_OUT_OF_BOUNDS: [CONNECT, mc.Publish(topic="a" * 300)],
        ts.Bug.V3_RESOURCE_LEAK: [mc.Connect(protocol_name="BAD")],
    }
    for bug, script in trigger_frames.items():
        for extras in (frozenset(), ts.ALL_BUGS - {bug}):
            with_bug = ts.Broker(ts.TargetConfig(enabled_bugs=frozenset({bug}) | extras))
            without = ts.Broker(ts.TargetConfig(enabled_bugs=extras))
            verdicts = []
            for broker in (with_bug, without):
                outcome = None
                for packet in script:
                    _, outcome = broker.handle_frame(mc.encode_packet(packet))
                    if outcome.is_anomaly:
                        break
                if outcome is not None and not outcome.is_anomaly:
                    outcome = broker.finish()
                verdicts.append(outcome)
            assert verdicts[0].is_anomaly, f"{bug} should fire with extras={extras}"
            assert not verdicts[1].is_anomaly, f"{bug} fired while disabled"


# -- sessions ----------------------------------------------------------------


def test_session_transcript_six_frames(tmp_path):
    transcript, verdict = ts.run_session(
        [CONNECT, mc.Pingreq(), mc.Disconnect()],
        config(),
        keylog_path=str(tmp_path / "keys.log"),
    )
    assert verdict.kind is ts.VerdictKind.OK
    assert len(transcript) == 6
    assert [d for d, _ in transcript] == ["c2s", "s2c"] * 3


def test_session_v4_script_crashes():
    transcript, verdict = ts.run_session(
        [CONNECT, SUBSCRIBE_WILD, V4_PUBLISH], config(ts.Bug.V4_DEEP_STATEFUL)
    )
    assert verdict.kind is ts.VerdictKind.CRASH
    assert verdict.crash_kind is bmc.FindingKind.ASSERTION_VIOLATION


def test_session_v3_leak_detected():
    _, verdict = ts.run_session(
        [mc.Connect(protocol_name="BAD"), mc.Disconnect()],
        config(ts.Bug.V3_RESOURCE_LEAK),
    )
    assert verdict.kind is ts.VerdictKind.LEAK_DETECTED


def test_session_writes_keylog(tmp_path):
    from ebf import secure_channel as sc

    path = str(tmp_path / "keys.log")
    ts.run_session([CONNECT, mc.Disconnect()], config(), keylog_path=path, nonce_seed=3)
    log = sc.parse_keylog(path)
    assert len(log.entries) == 1


def test_no_bug_safety_random_frames():
    cfg = config()
    broker = ts.Broker(cfg)
    rng = random.Random(2024)
    for _ in range(100_000):
        _, verdict = broker.handle_frame(random_frame(rng))
        assert not verdict.is_anomaly, verdict
    # Ledger audit after the storm: release whatever is tracked, no leaks.
    assert broker.finish().kind is ts.VerdictKind.OK


def test_no_bug_safety_random_sessions():
    rng = random.Random(31337)
    cfg = config()
    for i in range(10_000):
        script = [random_packet(rng) for _ in range(rng.randrange(1, 6))]
        _, verdict = ts.run_session(script, cfg, nonce_seed=i)
        assert not verdict.is_anomaly, (script, verdict)


def test_ledger_balance_clean_sessions():
    rng = random.Random(5)
    for i in range(500):
        broker = ts.Broker(config())
        for _ in range(rng.randrange(1, 8)):
            broker.handle_frame(mc.encode_packet(random_packet(rng)))
        broker.handle_frame(mc.encode_packet(mc.Disconnect()))
        assert broker.ledger.imbalance() == {}
        assert broker.ledger.acquired == broker.ledger.released


# -- the exported model ------------------------------------------------------


def test_model_agrees_on_100k_random_frames():
    cfg = config()
    model = ts.export_parser_model(cfg)
    rng = random.Random(424242)
    for _ in range(100_000):
        frame = random_frame(rng)
        tape = bmc.ConcreteTape(frame)
        assert model.run(tape) == ts.behavior_label(cfg, frame), frame.hex()


@pytest.mark.parametrize(
    "bugs",
    [
        frozenset({ts.Bug.V1_ABSENT_HANDLE_RELEASE}),
        frozenset({ts.Bug.V2_INDEX_OUT_OF_BOUNDS}),
        frozenset({ts.Bug.V3_RESOURCE_LEAK}),
        ts.ALL_BUGS,
    ],
)
def test_model_agrees_under_bug_configs(bugs):
    cfg = ts.TargetConfig(enabled_bugs=bugs)
    model = ts.export_parser_model(cfg)
    rng = random.Random(sum(ord(c) for b in bugs for c in b.value))
    for _ in range(20_000):
        frame = random_frame(rng)
        tape = bmc.ConcreteTape(frame)
        assert model.run(tape) == ts.behavior_label(cfg, frame), frame.hex()


def test_model_trace_matches_probe_trace_for_pingreq():
    cfg = config()
    model = ts.export_parser_model(cfg)
    frame = mc.encode_packet(mc.Pingreq())
    tape = bmc.ConcreteTape(frame)
    assert model.run(tape) == "ok:pingresp"
    broker = ts.Broker(cfg)
    broker.handle_frame(frame)
    assert broker.trace == ["entry", "pingreq"]
    assert ("byte0", "pingreq") in tape.decisions


def test_model_depth1_arm_count():
    cfg = config()
    model = ts.export_parser_model(cfg)
    result = bmc.explore_paths(
        model,
        bmc.SymbolicPacket.fully_symbolic(2),
        bmc.ExploreConfig(depth=1, budget_seconds=30, max_paths=10_000),
    )
    # One path per dispatch arm plus the reserved-type default.
    assert len(result.paths) == len(ts._B0_ARMS) + 1


def test_model_utf8_dfa_matches_python_exhaustive_two_bytes():
    # Every 2-byte topic: model's DFA verdict equals Python's decoder.
    cfg = config()
    model = ts.export_parser_model(cfg)
    for b0 in range(256):
        for b1 in range(256):
            frame = bytes([0x30, 0x04, 0x00, 0x02, b0, b1])
            tape = bmc.ConcreteTape(frame)
            got = model.run(tape)
            want = ts.behavior_label(cfg, frame)
            assert got == want, frame.hex()


def test_concrete_check_confirms_each_bug():
    cases = [
        (ts.Bug.V1_ABSENT_HANDLE_RELEASE, mc.encode_packet(mc.Disconnect()), "absent_handle_release"),
        (ts.Bug.V2_INDEX_OUT_OF_BOUNDS, mc.encode_packet(mc.Publish(topic="a" * 300)), "index_out_of_bounds"),
        (ts.Bug.V3_RESOURCE_LEAK, mc.encode_packet(mc.Connect(protocol_name="BAD")), "resource_leak"),
    ]
    for bug, frame, expected in cases:
        model = ts.export_parser_model(config(bug))
        assert model.concrete_check(frame) == expected
        clean = ts.export_parser_model(config())
        assert clean.concrete_check(frame) is None


# -- wildcards, responses, probes -------------------------------------------


@pytest.mark.parametrize(
    "flt,topic,expected",
    [
        ("a/#", "a/b", True),
        ("a/#", "a", True),
        ("a/#", "a/b/c", True),
        ("a/#", "b", False),
        ("a/+", "a/b", True),
        ("a/+", "a", False),
        ("a/+", "a/b/c", False),
        ("+/b", "a/b", True),
        ("a/b", "a/b", True),
        ("a/b", "a/c", False),
        ("#", "anything/at/all", True),
    ],
)
def test_topic_matches(flt, topic, expected):
    assert ts.topic_matches(flt, topic) is expected


def test_expected_response_rules():
    assert ts.expected_response_type(CONNECT, ts.Phase.FRESH) is mc.Connack
    assert ts.expected_response_type(CONNECT, ts.Phase.CONNECTED) is None
    assert ts.expected_response_type(mc.Pingreq(), ts.Phase.FRESH) is mc.Pingresp
    assert (
        ts.expected_response_type(
            mc.Publish(topic="t", qos=1, packet_id=1), ts.Phase.CONNECTED
        )
        is mc.Puback
    )
    assert ts.expected_response_type(mc.Publish(topic="t"), ts.Phase.CONNECTED) is None
    assert ts.expected_response_type(SUBSCRIBE_WILD, ts.Phase.CONNECTED) is mc.Suback
    assert ts.expected_response_type(mc.Disconnect(), ts.Phase.SUBSCRIBED) is mc.Disconnect


def test_probe_ids_stable_and_fired():
    class Sink:
        def __init__(self):
            self.pids = []

        def visit(self, pid):
            self.pids.append(pid)

    sink = Sink()
    broker = ts.Broker(config(), probe_sink=sink)
    broker.handle_frame(mc.encode_packet(mc.Pingreq()))
    assert sink.pids == [ts.probe_id("entry"), ts.probe_id("pingreq")]
    assert ts.probe_id("pingreq") == ts.probe_id("pingreq")


def test_snapshot_restore_isolates_state():
    broker = connected_broker()
    snap = broker.snapshot()
    broker.handle_frame(mc.encode_packet(SUBSCRIBE_WILD))
    assert broker.phase is ts.Phase.SUBSCRIBED
    broker.restore(snap)
    assert broker.phase is ts.Phase.CONNECTED
    assert broker.subscriptions == []
    # The restored session still tears down clean.
    broker.handle_frame(mc.encode_packet(mc.Disconnect()))
    assert broker.finish().kind is ts.VerdictKind.OK


# -- transports ---------------------------------------------------------------


def test_tcp_round_trip(tmp_path):
    keylog = str(tmp_path / "keys.log")
    with ts.TcpBrokerServer(config(), keylog_path=keylog) as server:
        client = ts.TcpBrokerClient(server.port)
        status, response = client.send_frame(mc.encode_packet(CONNECT))
        assert status is ts.VerdictKind.OK
        assert mc.decode_packet(response) == mc.Connack(False, 0)
        status, response = client.send_frame(mc.encode_packet(mc.Pingreq()))
        assert status is ts.VerdictKind.OK
        assert mc.decode_packet(response) == mc.Pingresp()
        client.close()
    from ebf import secure_channel as sc

    assert len(sc.parse_keylog(keylog).entries) == 1


def test_tcp_rejects_tampered_record():
    from ebf import secure_channel as sc

    with ts.TcpBrokerServer(config()) as server:
        client = ts.TcpBrokerClient(server.port)
        record = sc.seal(
            client.keys, sc.Direction.CLIENT_TO_SERVER, mc.encode_packet(mc.Pingreq())
        )
        tampered = sc.Record(
            record.session_id,
            record.direction,
            record.seq,
            record.nonce,
            bytes([record.ciphertext[0] ^ 0x80]) + record.ciphertext[1:],
        )
        status, _ = client.send_record(tampered)
        assert status == ts.TcpBrokerClient.REJECTED
        client.close()


def test_tcp_crash_closes_connection():
    with ts.TcpBrokerServer(config(ts.Bug.V1_ABSENT_HANDLE_RELEASE)) as server:
        client = ts.TcpBrokerClient(server.port)
        status, _ = client.send_frame(mc.encode_packet(mc.Disconnect()))
        assert status is ts.VerdictKind.CRASH
        client.close()


def test_subprocess_session_detects_abnormal_exit():
    verdict = ts.run_session_subprocess(
        [mc.Disconnect()], config(ts.Bug.V1_ABSENT_HANDLE_RELEASE)
    )
    assert verdict.kind is ts.VerdictKind.CRASH
    assert verdict.crash_kind is bmc.FindingKind.ABSENT_HANDLE_RELEASE


def test_subprocess_session_clean_exit():
    verdict = ts.run_session_subprocess([CONNECT, mc.Disconnect()], config())
    assert verdict.kind is ts.VerdictKind.OK
