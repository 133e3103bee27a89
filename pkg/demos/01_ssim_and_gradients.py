"""SSIM as a training signal: values on hand-built images and a gradient check.

Run:  python demos/01_ssim_and_gradients.py
"""

import numpy as np

from sharemod.similarity import SsimConfig, ssim, ssim_and_grads

checker = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)[None]
flat = np.full_like(checker, 0.5)
noise = np.random.default_rng(0).random(checker.shape)

print("SSIM(checker, checker)       =", round(ssim(checker, checker), 6))
print("SSIM(checker, 1 - checker)   =", round(ssim(checker, 1 - checker, SsimConfig(window=4)), 6),
      "(even window, closed form -(0.5-c2)/(0.5+c2))")
print("SSIM(checker, flat grey)     =", round(ssim(checker, flat), 6))
print("SSIM(checker, uniform noise) =", round(ssim(checker, noise), 6))

# The analytic gradient is what training follows; compare one entry with a central difference.
a = np.random.default_rng(1).random((1, 16, 16))
b = np.random.default_rng(2).random((1, 16, 16))
_, ga, _ = ssim_and_grads(a, b)
eps, idx = 1e-6, (0, 7, 9)
hi, lo = a.copy(), a.copy()
hi[idx] += eps
lo[idx] -= eps
fd = (ssim(hi, b) - ssim(lo, b)) / (2 * eps)
print(f"dSSIM/da at {idx}: analytic {ga[idx]:.8f}, central difference {fd:.8f}")
