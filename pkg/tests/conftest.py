"""Shared test helpers: seeded random packet/frame generators."""

from __future__ import annotations

import random

from ebf import mqtt_codec as mc

TOPIC_ALPHABET = "ab/#+é中 xyz0"


def random_text(rng: random.Random, max_len: int = 12) -> str:
    return "".join(rng.choice(TOPIC_ALPHABET) for _ in range(rng.randrange(max_len)))


def random_packet(rng: random.Random) -> mc.Packet:
    """Draw one valid packet, covering every type and flag combination."""
    kind = rng.randrange(9)
    if kind == 0:
        return mc.Connect(
            protocol_name=rng.choice(["MQTT", "MQIsdp", "", random_text(rng, 6)]),
            keep_alive=rng.randrange(0x10000),
            client_id=random_text(rng),
        )
    if kind == 1:
        return mc.Connack(session_present=rng.random() < 0.5, return_code=rng.randrange(256))
    if kind == 2:
        qos = rng.randrange(2)
        return mc.Publish(
            topic=random_text(rng),
            payload=rng.randbytes(rng.randrange(32)),
            qos=qos,
            packet_id=rng.randrange(1, 0x10000) if qos else None,
            dup=rng.random() < 0.5,
            retain=rng.random() < 0.5,
        )
    if kind == 3:
        return mc.Puback(packet_id=rng.randrange(0x10000))
    if kind == 4:
        filters = tuple(
            (random_text(rng), rng.randrange(2)) for _ in range(rng.randrange(1, 4))
        )
        return mc.Subscribe(packet_id=rng.randrange(0x10000), topic_filters=filters)
    if kind == 5:
        return mc.Suback(
            packet_id=rng.randrange(0x10000),
            return_codes=tuple(rng.randrange(256) for _ in range(rng.randrange(4))),
        )
    if kind == 6:
        return mc.Pingreq()
    if kind == 7:
        return mc.Pingresp()
    return mc.Disconnect()


def random_frame(rng: random.Random, max_len: int = 64) -> bytes:
    """Draw a hostile frame: raw noise, or a valid frame with a few bytes mangled."""
    roll = rng.random()
    if roll < 0.5:
        return rng.randbytes(rng.randrange(max_len + 1))
    frame = bytearray(mc.encode_packet(random_packet(rng)))
    if roll < 0.9 and frame:
        for _ in range(rng.randrange(1, 4)):
            frame[rng.randrange(len(frame))] = rng.randrange(256)
    return bytes(frame)
