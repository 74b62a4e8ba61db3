"""Reads the measured tool position, applies the per-axis offset and writes
the compensated position to the simulation model."""

import json
import math
import os
import sys
import urllib.request

BASE = os.environ["AAS_API_BASE"].rstrip("/")
SERVICE = os.environ["AAS_SERVICE_ID"]
TOKEN = os.environ.get("AAS_API_TOKEN")
AXES = ("X", "Y", "Z")


def call(method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(f"{BASE}/{path}", data=data, method=method)
    req.add_header("X-Aas-Service-Id", SERVICE)
    if TOKEN:
        req.add_header("Authorization", f"Bearer {TOKEN}")
    if data is not None:
        req.add_header("Content-Type", "application/json")
    with urllib.request.urlopen(req, timeout=10) as resp:
        raw = resp.read()
    return json.loads(raw) if raw else None


def offset(axis):
    value = float(os.environ.get(f"DELTA_{axis}", "0"))
    if not math.isfinite(value):
        raise ValueError(f"DELTA_{axis} is not finite")
    return value


def main():
    source = os.environ["AAS_INPUT_POSITION"]
    target = os.environ["AAS_OUTPUT_POSITION"]
    for axis in AXES:
        measured = float(call("GET", f"{source}.{axis}")["value"])
        if not math.isfinite(measured):
            raise ValueError(f"measured {axis} is not finite")
        call("PATCH", f"{target}.{axis}", {"value": measured + offset(axis)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
