#!/usr/bin/env python3
"""Walkthrough: the tape, gradient checking, Adam, and the LR schedule."""

import numpy as np

from minkunext import Adam, LrSchedule, Tape, Var, lr_at
from minkunext.gradcheck import run_gradcheck_suite

print("== reverse-mode tape ==")
tape = Tape()
x = Var(np.array([2.0]), name="x")
y = Var(x.data * x.data)
tape.record(y, (x,), lambda g: (g * 2 * x.data,))
z = Var(y.data + x.data)
tape.record(z, (y, x), lambda g: (g, g))
grads = tape.backward(z)
print(f"d(x^2 + x)/dx at x=2: {grads[x][0]} (expected 5)")

print("\n== finite-difference suite (a few ops) ==")
for op in ("sparse_conv", "layer_norm", "gem_pool", "tsap_loss"):
    err = run_gradcheck_suite(op=op)[op]
    print(f"{op:<12} max rel err {err:.2e}")

print("\n== Adam on a quadratic ==")
theta = Var(np.array([5.0, -3.0]), name="theta")
opt = Adam([theta], lr=0.3)
for step in range(60):
    grad = 2 * theta.data  # d/dtheta of |theta|^2
    opt.step({theta: grad})
print(f"after 60 steps: theta = {np.round(theta.data, 4)} (expected ~0)")

print("\n== step LR schedule ==")
sched = LrSchedule(1e-3, milestones=(250, 350))
for epoch in (0, 249, 250, 349, 350, 399):
    print(f"epoch {epoch:>3}: lr = {lr_at(sched, epoch):.0e}")
