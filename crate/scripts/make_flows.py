#!/usr/bin/env python3
"""Write the two laboratory networks and balanced synthetic flow series.

    python3 scripts/make_flows.py [--out data]

Each network goes to <out>/<name>/network.json and <out>/<name>/flows.csv
(columns time,pipe_id,flow_lps; time is the step index).
"""

import argparse
import csv
import json
import math
from pathlib import Path

CAP_L = 1.5


def pipe(a, b, length, diameter, suffix=""):
    return {
        "id": f"{a}-{b}{suffix}",
        "from_node": a,
        "to_node": b,
        "length": length,
        "diameter": diameter,
    }


def wave(t, base, amp, period, phase=0.0):
    return base + amp * math.sin(2 * math.pi * t / period + phase)


def tank_network():
    nodes = [
        {"id": "P1", "kind": "source", "tank_volume_l": 30.0},
        {"id": "P2", "kind": "source", "tank_volume_l": 30.0},
        {"id": "J1", "kind": "junction"},
        {"id": "J2", "kind": "junction"},
        {"id": "J3", "kind": "junction"},
        {"id": "J4", "kind": "junction"},
        {"id": "C1", "kind": "consumer"},
        {"id": "C2", "kind": "consumer"},
    ]
    pipes = [
        pipe("J1", "J2", 20, 13),
        pipe("J1", "J3", 20, 25),
        pipe("J1", "J4", 20, 25),
        pipe("J2", "C1", 5, 25),
        pipe("J2", "J3", 20, 25),
        pipe("J3", "C2", 5, 25),
        pipe("J4", "J2", 20, 20),
        pipe("J4", "J3", 20, 20),
        pipe("P1", "J1", 20, 25),
        pipe("P2", "J4", 3, 25),
    ]
    network = {
        "segment_volume_cap": CAP_L,
        "nodes": nodes,
        "pipes": pipes,
        "sensors": ["J2-C1#1", "J3-C2#1"],
    }

    def flows(t):
        total = wave(t, 0.30, 0.05, 120)
        s1 = total * wave(t, 0.55, 0.05, 90)
        s2 = total - s1
        j1j2, j1j3 = 0.2 * s1, 0.4 * s1
        j1j4 = s1 - j1j2 - j1j3
        j4_in = s2 + j1j4
        j4j2 = j4_in * wave(t, 0.5, 0.1, 70, 1.0)
        j4j3 = j4_in - j4j2
        j2_in = j1j2 + j4j2
        j2c1 = j2_in * wave(t, 0.6, 0.1, 80, 2.0)
        j2j3 = j2_in - j2c1
        j3c2 = j1j3 + j4j3 + j2j3
        return {
            "J1-J2": j1j2,
            "J1-J3": j1j3,
            "J1-J4": j1j4,
            "J2-C1": j2c1,
            "J2-J3": j2j3,
            "J3-C2": j3c2,
            "J4-J2": j4j2,
            "J4-J3": j4j3,
            "P1-J1": s1,
            "P2-J4": s2,
        }

    return network, flows, 196


def pipe_network():
    nodes = [
        {"id": "P1", "kind": "source", "tank_volume_l": 30.0},
        {"id": "J1", "kind": "junction"},
        {"id": "J2", "kind": "junction"},
        {"id": "J3", "kind": "junction"},
        {"id": "J4", "kind": "junction"},
        {"id": "J5", "kind": "junction"},
        {"id": "C1", "kind": "consumer"},
        {"id": "C2", "kind": "consumer"},
    ]
    pipes = [
        pipe("J1", "J2", 20, 25, "a"),
        pipe("J1", "J2", 20, 25, "b"),
        pipe("J1", "J4", 20, 13),
        pipe("J2", "J3", 20, 20),
        pipe("J2", "J4", 20, 20),
        pipe("J3", "C2", 5, 25),
        pipe("J4", "J3", 20, 25),
        pipe("J4", "J5", 5, 13),
        pipe("J5", "C1", 5, 25),
        pipe("P1", "J1", 20, 25),
    ]
    network = {
        "segment_volume_cap": CAP_L,
        "nodes": nodes,
        "pipes": pipes,
        "sensors": ["J2-J3#0", "J4-J5#0"],
    }

    def flows(t):
        total = wave(t, 0.35, 0.05, 150)
        j1j4 = 0.25 * total
        j1j2 = total - j1j4
        # valves switch the J1-J2 flow onto the contaminated pipe at t = 30
        a, b = (j1j2, 0.0) if t < 30 else (0.0, j1j2)
        j2j3 = j1j2 * wave(t, 0.5, 0.1, 100)
        j2j4 = j1j2 - j2j3
        j4_in = j1j4 + j2j4
        j4j5 = j4_in * wave(t, 0.45, 0.05, 60, 0.5)
        j4j3 = j4_in - j4j5
        return {
            "J1-J2a": a,
            "J1-J2b": b,
            "J1-J4": j1j4,
            "J2-J3": j2j3,
            "J2-J4": j2j4,
            "J3-C2": j2j3 + j4j3,
            "J4-J3": j4j3,
            "J4-J5": j4j5,
            "J5-C1": j4j5,
            "P1-J1": total,
        }

    return network, flows, 300


def write(out, name, network, flows, horizon):
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "network.json").write_text(json.dumps(network, indent=2) + "\n")
    with open(d / "flows.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time", "pipe_id", "flow_lps"])
        for t in range(horizon):
            row = flows(t)
            for p in network["pipes"]:
                w.writerow([t, p["id"], f"{row[p['id']]:.12g}"])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args()
    write(args.out, "contaminated_tank", *tank_network())
    write(args.out, "contaminated_pipe", *pipe_network())


if __name__ == "__main__":
    main()
