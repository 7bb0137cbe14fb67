#!/usr/bin/env python3
"""Generate fixtures/iiot_sample.csv, a small imbalanced IIoT-style flow table.

Each traffic class is a mixture of a few latent clusters pushed through a
fixed random mixing matrix and per-column transforms (log-normal byte counts,
integer counters, TCP flag bits). Classes overlap in every single column but
separate well jointly. Also included: a categorical `protocol` column, a
constant column, and a ratio column containing inf and NaN cells.

Only the standard library is used so the output is stable across machines.
Usage: python3 scripts/gen_iiot_fixture.py [output.csv]
"""

import csv
import math
import random
import sys

SEED = 20240611
LATENT = 5
MODE_STD = 0.55

CLASSES = [
    ("Normal", 760, 3),
    ("DDoS_UDP", 330, 2),
    ("DDoS_TCP", 280, 2),
    ("DDoS_HTTP", 190, 2),
    ("Port_Scanning", 170, 2),
    ("SQL_injection", 120, 2),
    ("Password", 90, 2),
    ("Ransomware", 60, 2),
]

PROTOCOLS = ["TCP", "UDP", "HTTP", "MQTT", "ICMP", "DNS"]

# name, transform
COLUMNS = [
    ("frame.time_delta", "exp_small"),
    ("tcp.len", "exp_bytes"),
    ("tcp.srcport_entropy", "linear"),
    ("tcp.flags.syn", "flag"),
    ("tcp.flags.ack", "flag"),
    ("udp.length", "exp_bytes"),
    ("http.content_length", "exp_bytes"),
    ("mqtt.msg_rate", "count"),
    ("dns.qry_count", "count"),
    ("conn.duration", "linear"),
    ("pkt.rate", "exp_small"),
    ("payload.entropy", "linear"),
    ("bytes.out", "exp_bytes"),
    ("bytes.in", "exp_bytes"),
]


def transform(kind, u, rng):
    if kind == "linear":
        return round(u * 10.0 + 50.0, 4)
    if kind == "exp_small":
        return round(math.exp(0.6 * u) * 0.01, 6)
    if kind == "exp_bytes":
        return round(math.exp(0.45 * u + 5.0))
    if kind == "count":
        return max(0, int(round(4.0 * u + 10.0)))
    if kind == "flag":
        return 1 if u + rng.gauss(0.0, 0.4) > 0.0 else 0
    raise ValueError(kind)


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "fixtures/iiot_sample.csv"
    rng = random.Random(SEED)
    mixing = [[rng.uniform(-1.0, 1.0) for _ in range(LATENT)] for _ in COLUMNS]

    rows = []
    for name, count, n_modes in CLASSES:
        modes = []
        for _ in range(n_modes):
            center = [rng.uniform(-2.5, 2.5) for _ in range(LATENT)]
            weights = [rng.random() for _ in PROTOCOLS]
            proto = rng.choices(PROTOCOLS, weights=[w**3 for w in weights])[0]
            modes.append((center, proto))
        for i in range(count):
            center, proto = modes[i % n_modes]
            z = [c + rng.gauss(0.0, MODE_STD) for c in center]
            if rng.random() < 0.1:
                proto = rng.choice(PROTOCOLS)
            values = []
            for (col, kind), a in zip(COLUMNS, mixing):
                u = sum(ai * zi for ai, zi in zip(a, z)) + rng.gauss(0.0, 0.15)
                values.append(transform(kind, u, rng))
            bytes_out, bytes_in = values[-2], values[-1]
            if rng.random() < 0.03:
                bytes_in = 0
                values[-1] = 0
            if rng.random() < 0.01:
                ratio = "nan"
            elif bytes_in == 0:
                ratio = "inf"
            else:
                ratio = round(bytes_out / bytes_in, 6)
            rows.append([proto] + values + [0, ratio, name])

    rng.shuffle(rows)
    header = ["protocol"] + [c for c, _ in COLUMNS] + ["icmp.unused", "bytes.ratio", "Attack_type"]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


if __name__ == "__main__":
    main()
