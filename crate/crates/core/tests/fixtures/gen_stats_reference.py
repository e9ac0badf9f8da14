# SPDX-License-Identifier: MIT OR Apache-2.0
"""Regenerates stats_reference.json with scipy as the reference oracle.

Run: python3 gen_stats_reference.py > stats_reference.json
"""
import json

import numpy as np
from scipy import stats

rng = np.random.default_rng(20240917)


def factor_pairs(dof):
    out = []
    for r in range(1, dof + 1):
        if dof % r == 0:
            out.append((r + 1, dof // r + 1))
    return out


tables = []
for i in range(200):
    dof = 1 + (i % 40)
    rows, cols = factor_pairs(dof)[rng.integers(len(factor_pairs(dof)))]
    while True:
        base = rng.integers(1, 40, size=cols).astype(float)
        tilt = rng.uniform(0.3, 3.0, size=(rows, cols)) if i % 3 else np.ones((rows, cols))
        lam = base[None, :] * tilt
        counts = rng.poisson(lam)
        if i % 7 == 0:
            # Insert all-zero columns that must be dropped before testing.
            zeros = np.zeros((rows, 1 + i % 3), dtype=int)
            counts = np.concatenate([counts[:, :1], zeros, counts[:, 1:]], axis=1)
        keep = counts.sum(axis=0) > 0
        if keep.sum() == cols and (counts.sum(axis=1) > 0).all():
            break
    reduced = counts[:, keep]
    chi2, p, d, _ = stats.chi2_contingency(reduced, correction=False)
    n = reduced.sum()
    v = float(np.sqrt(chi2 / (n * (min(reduced.shape) - 1))))
    tables.append(
        {
            "counts": counts.tolist(),
            "chi2": float(chi2),
            "dof": int(d),
            "dof_before_drop": int((counts.shape[0] - 1) * (counts.shape[1] - 1)),
            "p_value": float(p),
            "p_value_sf": float(stats.chi2.sf(chi2, d)),
            "cramers_v": v,
        }
    )

bh = []
for g in range(10):
    ps = np.array([t["p_value"] for t in tables[g * 20:(g + 1) * 20]])
    adj = stats.false_discovery_control(ps, method="bh")
    bh.append({"p_values": ps.tolist(), "adjusted": adj.tolist(),
               "significant": (adj < 0.05).tolist()})

print(json.dumps({"tables": tables, "bh": bh}, indent=1))
