#!/usr/bin/env python3
"""Walkthrough: the truncated smooth average-precision loss."""

import numpy as np

from minkunext import LossConfig, tsap_loss

cfg = LossConfig(tau=0.01, k=4, batch_size=3)

print("== closed-form cases ==")
desc = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
pos = np.zeros((3, 3), bool)
neg = np.zeros((3, 3), bool)
pos[0, 1] = True
loss, _, _ = tsap_loss(desc, pos, neg, cfg)
print(f"one positive, no negatives      : loss = {loss} (exact 0)")

neg[0, 2] = True
loss, _, _ = tsap_loss(desc, pos, neg, cfg)
print(f"positive/negative tied at d=1   : loss = {loss:.12f} (1/3: G(0) = 0.5)")

desc2 = np.array([[0.0], [0.1], [0.5]])
loss, _, _ = tsap_loss(desc2, pos, neg, cfg)
print(f"positive 0.1 vs negative 0.5    : loss = {loss:.2e} (sigmoid saturated)")

print("\n== pushing a negative away never hurts ==")
rng = np.random.default_rng(0)
desc = rng.standard_normal((4, 3))
pos = np.zeros((4, 4), bool)
neg = np.zeros((4, 4), bool)
pos[0, 1] = True
neg[0, 2] = neg[0, 3] = True
cfg = LossConfig(tau=0.2, k=4, batch_size=4)
for scale in (1.0, 1.5, 2.5, 4.0):
    moved = desc.copy()
    moved[2] = desc[0] + scale * (desc[2] - desc[0])
    loss, _, _ = tsap_loss(moved, pos, neg, cfg)
    d = np.linalg.norm(moved[2] - moved[0])
    print(f"negative at distance {d:5.2f}: loss = {loss:.6f}")

print("\n== descent pulls positives in, pushes negatives out ==")
desc = np.array([[0.0, 0.0], [0.6, 0.0], [0.5, 0.1]])
loss, grad, _ = tsap_loss(desc, pos[:3, :3], neg[:3, :3], cfg)
print(f"gradient on the positive: {np.round(grad[1], 4)} (descent moves it toward the query)")
print(f"gradient on the negative: {np.round(grad[2], 4)} (descent moves it away)")
