# SPDX-License-Identifier: Apache-2.0
# Independent reference values frozen into the C++ unit tests. Uses torch's
# float8 casts and plain numpy, never the library under test.
import math
import numpy as np
import torch

def e2m1_grid():
    vals = set()
    for e in range(4):
        for m in range(2):
            vals.add((m / 2) * 2 ** 0 if e == 0 else (1 + m / 2) * 2 ** (e - 1))
    return sorted(vals)

print("e2m1 grid", e2m1_grid())
xs = [0.1, 0.26, 0.75, 1.25, 2.5, 2.6, 3.5, 5.0, 5.1, 447.0, 300.0, 17.0, 0.0009765625, 0.001953125 * 1.5, 1e-4]
for x in xs:
    if x <= 448:
        print("e4m3", repr(x), float(torch.tensor([x], dtype=torch.float64).to(torch.float8_e4m3fn).to(torch.float64)[0]))

g = np.array([1.0, 0.0, 0.0, 0.0])
print("adv", (g - g.mean()) / g.std())
print("ratio", 0.05 / 0.02, 0.80 / 0.77)
print("exp1", math.exp(1.0))

# Frozen FP8 e4m3 cast table: random magnitudes over the whole range plus exact
# midpoints between neighbouring grid values.
def write_e4m3_table(path):
    rng = np.random.default_rng(7)
    vals = list(np.exp(rng.uniform(math.log(1e-4), math.log(440.0), 150)) * rng.choice([-1.0, 1.0], 150))
    grid = sorted(set(float(v) for v in torch.arange(0, 256, dtype=torch.uint8).view(torch.float8_e4m3fn).to(torch.float64) if math.isfinite(v) and v >= 0))
    for a, b in zip(grid[::9], grid[1::9]):
        vals.append((a + b) / 2)
    out = torch.tensor(vals, dtype=torch.float64).to(torch.float8_e4m3fn).to(torch.float64)
    with open(path, "w") as f:
        f.write("// SPDX-License-Identifier: Apache-2.0\n// Generated by gen_oracles.py from torch.float8_e4m3fn casts.\n")
        for x, y in zip(vals, out.tolist()):
            f.write(f"{{{float(x)!r}, {float(y)!r}}},\n")

write_e4m3_table(__file__.replace("gen_oracles.py", "e4m3_cases.inc"))

# Hand evaluation of the sequence-level surrogate on a three-response batch.
def seq_batch():
    eps_h, d_l, d_h, c = 0.05, 0.05, 0.10, 2.0
    batch = [
        (1.0, [-1.0, -2.0], [-0.98, -1.99], [-1.1, -2.05]),
        (-1.0, [-0.5, -0.7, -0.2], [-0.45, -0.66, -0.21], [-0.5, -0.6, -0.3]),
        (-1.0, [-1.0, -1.0], [-0.8, -0.85], [-1.0, -1.0]),
    ]
    total = 0.0
    for a, lo, lc, ls in batch:
        r = math.exp(np.mean(np.array(lc) - np.array(lo)))
        w = math.exp(np.mean(np.array(lo) - np.array(ls)))
        w = min(max(w, 1 / c), c)
        lo_b, hi_b = (0.0, 1 + eps_h) if a >= 0 else (1 - d_l, 1 + d_h)
        rt = min(max(r, lo_b), hi_b)
        g = -w * a * r / len(lo) / len(batch) if rt == r else 0.0
        print("seq", repr(r), repr(w), repr(rt), "grad/token", repr(g))
        total += -w * rt * a
    print("seq loss", repr(total / len(batch)))
    # GSPO with symmetric band [1-0.05, 1+0.05], no mismatch weight
    total = 0.0
    for a, lo, lc, ls in batch:
        r = math.exp(np.mean(np.array(lc) - np.array(lo)))
        total += -min(max(r, 0.95), 1.05) * a
    print("gspo loss", repr(total / len(batch)))

seq_batch()
