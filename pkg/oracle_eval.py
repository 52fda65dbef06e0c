"""Independent oracles for eval metrics (run before freezing tests)."""
import itertools
import math
import sys

import torch

sys.path.insert(0, "/root/pkg/src")
from monophys.eval import chamfer, emd, psnr  # noqa: E402

torch.manual_seed(0)

# --- chamfer vs O(n^2) python double loop ---------------------------------
a = torch.rand(37, 3, dtype=torch.float64) * 0.2
b = torch.rand(41, 3, dtype=torch.float64) * 0.2 + 0.05


def chamfer_bruteforce(p, g):
    def mean_min(x, y):
        total = 0.0
        for i in range(x.shape[0]):
            best = min(float(((x[i] - y[j]) ** 2).sum())
                       for j in range(y.shape[0]))
            total += best
        return total / x.shape[0]
    return (0.5 * mean_min(p, g) + 0.5 * mean_min(g, p)) * 1e4


cd_fast = chamfer(a, b)
cd_slow = chamfer_bruteforce(a, b)
print(f"chamfer fast={cd_fast:.12g} brute={cd_slow:.12g} "
      f"absdiff={abs(cd_fast-cd_slow):.3e}")
print(f"chamfer symmetry: {abs(chamfer(a, b) - chamfer(b, a)):.3e}")

# single points at distance d
d = 0.03
pa = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
pb = torch.tensor([[d, 0.0, 0.0]], dtype=torch.float64)
print(f"chamfer single pts d={d}m -> {chamfer(pa, pb):.10g} "
      f"(expect {d*d*1e4:.10g})")

# --- emd: identical clouds -------------------------------------------------
c = torch.rand(64, 3, dtype=torch.float64) * 0.3
diag_sq = float(((c.max(0).values - c.min(0).values) ** 2).sum())
e_same = emd(c, c)
print(f"emd identical: {e_same:.3e}  (tol 1e-4*diag^2 = {1e-4*diag_sq:.3e})")

# --- emd: translation by d -> ~ d^2 ----------------------------------------
for d in (0.02, 0.05):
    shift = torch.tensor([d, 0.0, 0.0], dtype=torch.float64)
    e_tr = emd(c, c + shift)
    rel = abs(e_tr - d * d) / (d * d)
    print(f"emd translate d={d}: {e_tr:.6e} vs d^2={d*d:.6e} rel={rel:.4f}")

# --- emd: <=6 points vs permutation brute force -----------------------------
for n in (4, 6):
    x = torch.rand(n, 3, dtype=torch.float64) * 0.2
    y = torch.rand(n, 3, dtype=torch.float64) * 0.2
    C = torch.cdist(x, y) ** 2
    best = min(sum(float(C[i, p[i]]) for i in range(n)) / n
               for p in itertools.permutations(range(n)))
    e_val = emd(x, y)
    print(f"emd n={n}: sinkhorn={e_val:.8e} assignment={best:.8e} "
          f"rel={(e_val-best)/best:+.4%}")

# --- psnr -------------------------------------------------------------------
img = torch.rand(16, 16, 3, dtype=torch.float64)
print(f"psnr identical: {psnr(img, img)}")
noise = torch.full_like(img, 0.1)
img2 = (img + noise).clamp(0, 1)
mse_img = torch.zeros(10, 10, 3, dtype=torch.float64)
mse_tgt = torch.full_like(mse_img, 0.1)  # MSE = 0.01 -> 20 dB
print(f"psnr mse=0.01: {psnr(mse_img, mse_tgt):.10g} (expect 20)")
