"""Builds data/grid36.json: a synthetic 36-bus, 59-line test network.

Topology is a ring with chords; line limits are set from a nominal DC
solve so the base case carries margins between roughly 0.4 and 0.65.
"""
import json
import sys

import numpy as np

rng = np.random.default_rng(36)
N, L = 36, 59
buses = list(range(1, N + 1))

edges = [(i, i % N + 1) for i in range(1, N + 1)]
seen = {tuple(sorted(e)) for e in edges}
while len(edges) < L:
    a, b = (int(v) for v in rng.choice(buses, 2, replace=False))
    if abs(a - b) in (1, N - 1) or tuple(sorted((a, b))) in seen:
        continue
    seen.add(tuple(sorted((a, b))))
    edges.append((a, b))
x = np.round(rng.uniform(0.05, 0.3, L), 4)

# The first five generators carry the published ramp/capacity/cost table.
gen_table = [(10.4, 250, 36), (9.9, 350, 40), (8.5, 300, 48), (4.3, 150, 46), (2.8, 100, 44),
             (2.2, 120, 30), (1.9, 90, 52), (1.6, 80, 55), (1.2, 60, 58), (1.5, 400, 25)]
gen_bus = [4, 9, 13, 17, 21, 25, 28, 31, 34, 1]  # last one sits on the slack bus
load_bus = list(range(1, N + 1)) + [18]
load_base = np.round(rng.uniform(10.0, 40.0, len(load_bus)), 2)

total = load_base.sum()
cap = sum(p for _, p, _ in gen_table[:-1])
gen = np.array([0.7 * total * p / cap for _, p, _ in gen_table[:-1]] + [0.0])
gen[-1] = total - gen.sum()

inj = np.zeros(N)
for j, b in enumerate(gen_bus):
    inj[b - 1] += gen[j]
for k, b in enumerate(load_bus):
    inj[b - 1] -= load_base[k]
B = np.zeros((N, N))
for (f, t), xl in zip(edges, x):
    y = 1.0 / xl
    B[f - 1, f - 1] += y
    B[t - 1, t - 1] += y
    B[f - 1, t - 1] -= y
    B[t - 1, f - 1] -= y
theta = np.zeros(N)
theta[1:] = np.linalg.solve(B[1:, 1:], inj[1:] / 100.0)
flows = np.array([100.0 * (theta[f - 1] - theta[t - 1]) / xl for (f, t), xl in zip(edges, x)])
limits = np.round(np.maximum(np.abs(flows) / rng.uniform(0.4, 0.65, L), 20.0), 1)

doc = {
    "base_mva": 100.0,
    "slack_bus": 1,
    "buses": buses,
    "lines": [{"id": i + 1, "from": f, "to": t, "x": float(x[i]), "f_max": float(limits[i])}
              for i, (f, t) in enumerate(edges)],
    "generators": [{"id": j + 1, "bus": gen_bus[j], "p_min": 0.0, "p_max": float(p), "ramp": r, "cost": float(c)}
                   for j, (r, p, c) in enumerate(gen_table)],
    "loads": [{"id": k + 1, "bus": b} for k, b in enumerate(load_bus)],
}
json.dump(doc, open(sys.argv[1] if len(sys.argv) > 1 else "data/grid36.json", "w"), indent=1)
