"""Fusing the previous and current feature maps.

Each map is squeezed to half its channels by a shared 1x1 projection, the two
halves are stacked (current first) so the output has the original channel count,
and the current map is added back. At stream start there is no previous map,
so the current one is duplicated, which makes the first output identical to a
static scene. Gradients are verified against central finite differences.
"""

import numpy as np

from streamperc.dfp import DFPConfig, dfp_fuse, dfp_grad_check, random_instance

params, f_prev, f_cur = random_instance(seed=0, c=4, h=3, w=3)
out = dfp_fuse(f_prev, f_cur, params)
print(f"input {f_cur.shape} -> output {out.shape}")

plain = dfp_fuse(f_cur, f_cur, params, DFPConfig(residual=False))
print("same frame twice, dynamic halves bit-equal:", np.array_equal(plain[:2], plain[2:]))

buffer = f_cur.copy()  # first frame: duplicated buffer
print("first-frame output equals static-scene output:",
      np.array_equal(dfp_fuse(buffer, f_cur, params), dfp_fuse(f_cur, f_cur, params)))

moved = dfp_fuse(f_prev, f_cur, params) - dfp_fuse(f_cur, f_cur, params)
print(f"motion only changes the previous-frame half: "
      f"max |delta| current half {np.abs(moved[:2]).max():.1e}, "
      f"previous half {np.abs(moved[2:]).max():.2f}")

for seed in range(1, 6):
    p, a, b = random_instance(seed)
    print(f"seed {seed}: gradient rel. error {dfp_grad_check(p, a, b):.2e}")
