"""
State-space scans, three ways
=============================

A diagonal state-space model can be run as a recurrence, as a long
convolution, or (when its parameters change per frame) as a selective scan.
This walk-through checks that the three agree and that the selective scan
costs time linear in the sequence length.

Run with ``python demos/01_state_space_scan.py``.
"""
import time

import numpy as np

from metst.ssm import (SsmParams, apply_conv_form, build_conv_kernel, discretize_zoh,
                       scan_recurrent, selective_scan)

rng = np.random.default_rng(0)

# A continuous system x'(t) = A x + B u, y = C x with 4 decaying modes.
# Zero-order hold turns it into h_t = A_bar h_{t-1} + B_bar u_t.
p = SsmParams(A=-rng.uniform(0.1, 2.0, 4), B=rng.normal(size=4), C=rng.normal(size=4), delta=0.3)
A_bar, B_bar = discretize_zoh(p.A, p.B, p.delta)
print("A_bar =", np.round(A_bar, 4), " (all inside the unit interval, so the scan is stable)")

# Recurrent and convolutional evaluation of the same input.
u = rng.normal(size=256)
y_rec = scan_recurrent(p, u)
kernel = build_conv_kernel(p, len(u))
y_conv = apply_conv_form(kernel, u)
print(f"recurrent vs convolution: max |diff| = {np.abs(y_rec - y_conv).max():.2e}")

# The impulse response is the kernel itself and fades with the slowest mode.
impulse = np.zeros(40)
impulse[0] = 1.0
print("impulse response, first 6 taps:", np.round(scan_recurrent(p, impulse)[:6], 4))

# The selective scan takes per-frame step sizes and per-frame B and C.
# Feeding it constant values reproduces the LTI result.
T = len(u)
y_sel = selective_scan(u[None], np.full((1, T), p.delta), p.A[None],
                       np.repeat(p.B[:, None], T, 1), np.repeat(p.C[:, None], T, 1))[0]
print(f"selective (constant params) vs recurrent: max |diff| = {np.abs(y_sel - y_rec).max():.2e}")

# Now let the step size follow the input, which is what makes the model
# "selective": large steps let new input overwrite the state quickly.
delta = np.log1p(np.exp(u))[None] * 0.2
y_sel2 = selective_scan(u[None], delta, p.A[None], np.repeat(p.B[:, None], T, 1),
                        np.repeat(p.C[:, None], T, 1))[0]
print(f"input-dependent steps change the output by up to {np.abs(y_sel2 - y_rec).max():.3f}")

# Cost grows linearly with T. Time 32 channels with 8 states per channel.
Dn, N = 32, 8
A = -rng.uniform(0.1, 4.0, size=(Dn, N))
selective_scan(rng.normal(size=(Dn, 8)), np.full((Dn, 8), 0.1), A,
               rng.normal(size=(N, 8)), rng.normal(size=(N, 8)))  # compile once
for T in (8192, 16384, 32768, 65536):
    args = (rng.normal(size=(Dn, T)), rng.uniform(0.01, 0.5, (Dn, T)), A,
            rng.normal(size=(N, T)), rng.normal(size=(N, T)))
    t0 = time.perf_counter()
    for _ in range(5):
        selective_scan(*args)
    ms = (time.perf_counter() - t0) / 5 * 1e3
    print(f"T = {T:6d}: {ms:7.2f} ms  ({ms / T * 1e6:.1f} ns per frame)")
