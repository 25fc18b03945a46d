"""Simplified Cooperative Awareness Message record.

A CAM here is a flat JSON object padded to a fixed byte size, standing in
for the ASN.1-encoded ETSI message. Coordinates use the ETSI units
(tenths of a micro-degree), speed is in cm/s and heading in 0.1 degrees.
"""
from __future__ import annotations

import json

CITS_PAYLOAD_BYTES = 1000
PAD_FIELD = "pad"


def make_cam(station_id: int, lat: float, lon: float, gen_delta_ms: int = 0, speed_cms: int = 0,
             heading_ddeg: int = 0, **extra) -> dict:
    record = {
        "stationID": int(station_id),
        "stationType": 5,
        "generationDeltaTime": int(gen_delta_ms) % 65536,
        "latitude": int(round(lat * 1e7)),
        "longitude": int(round(lon * 1e7)),
        "speed": int(speed_cms),
        "heading": int(heading_ddeg) % 3601,
        "vehicleLength": 45,
        "vehicleWidth": 18,
    }
    record.update(extra)
    return record


def encode_cam(record: dict, size: int = CITS_PAYLOAD_BYTES) -> bytes:
    """Serialise ``record`` and pad it to exactly ``size`` bytes."""
    body = {k: v for k, v in record.items() if k != PAD_FIELD}
    base = json.dumps({**body, PAD_FIELD: ""}, separators=(",", ":")).encode("utf-8")
    missing = size - len(base)
    if missing < 0:
        raise ValueError(f"CAM record needs {len(base)} bytes, more than {size}")
    return json.dumps({**body, PAD_FIELD: "0" * missing}, separators=(",", ":")).encode("utf-8")


def decode_cam(payload: bytes) -> dict:
    record = json.loads(payload.decode("utf-8"))
    record.pop(PAD_FIELD, None)
    return record
