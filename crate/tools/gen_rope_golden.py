#!/usr/bin/env python3
"""Regenerate tests/fixtures/rope_golden.json.

Rotation test vectors computed with numpy complex arithmetic, independent
of the Rust implementation. Pair j of a head vector is (2j, 2j+1) viewed
as re + i*im; it rotates by exp(i * theta_t * p[axis]) with axis = j % 3,
t = j // 3 and theta_t = base ** (-t / (d_head / 6)).
"""

import json
import numpy as np

rng = np.random.default_rng(20240817)


def rotate(vec, pos, d_head, base):
    steps = d_head // 6
    z = vec[0::2] + 1j * vec[1::2]
    j = np.arange(d_head // 2)
    theta = base ** (-(j // 3) / steps) * pos[j % 3]
    w = z * np.exp(1j * theta)
    out = np.empty(d_head)
    out[0::2] = w.real
    out[1::2] = w.imag
    return out


cases = []
for d_head in (6, 12, 24):
    for base in (10.0, 100.0, 1000.0, 10000.0):
        for _ in range(4):
            vec = rng.uniform(-1.0, 1.0, d_head)
            pos = rng.uniform(-3.0, 3.0, 3)
            cases.append(
                {
                    "d_head": d_head,
                    "base": base,
                    "vec": vec.tolist(),
                    "pos": pos.tolist(),
                    "rotated": rotate(vec, pos, d_head, base).tolist(),
                }
            )

with open("crates/core/tests/fixtures/rope_golden.json", "w") as f:
    json.dump({"cases": cases}, f, indent=1)
    f.write("\n")
print(f"wrote {len(cases)} cases")
