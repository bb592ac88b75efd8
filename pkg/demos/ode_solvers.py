"""
Integrating feature maps through an ODE block
=============================================

The feature block of the segmenter is a small convolutional vector field
integrated from t=0 to t=1. This script compares the three solvers on a
problem with a known answer, then measures the empirical order of the
fixed-step methods.
"""

# %%
# A linear field dz/dt = rate * z has the closed form z(t) = z0 * exp(rate * t).
import math

import torch

from rpnode.ode import ConvDynamics, LinearDynamics, SolverConfig, convergence_order, integrate

torch.set_default_dtype(torch.float64)
z0 = torch.tensor([1.0])
for method, steps in [("euler_fixed", 10), ("rk4_fixed", 10), ("dopri_adaptive", 2)]:
    z1 = integrate(z0, LinearDynamics(1.0), SolverConfig(method, 1.0, steps))
    print(f"{method:15s} z(1) = {float(z1):.10f}   error {abs(float(z1) - math.e):.2e}")

# %%
# Halving the step of RK4 shrinks the error about 16x, Euler only 2x.
exact = torch.tensor([math.exp(-1.0)])
for method in ("euler_fixed", "rk4_fixed"):
    est = convergence_order(LinearDynamics(-1.0), z0, 1.0, exact=exact, method=method, base_steps=8)
    print(f"{method:12s} order {est.order:.2f}  errors {[f'{e:.1e}' for e in est.errors]}")

# %%
# The same solver drives a convolutional field on a (B, C, H, W) feature map.
# No exact solution here, so the order is estimated against a much finer run.
torch.manual_seed(0)
field = ConvDynamics(channels=4)
feats = torch.randn(1, 4, 8, 8)
with torch.no_grad():
    out = integrate(feats, field, SolverConfig())
    est = convergence_order(field, feats, 1.0)
print("feature map", tuple(out.shape), f"moved by {float((out - feats).norm()):.3f}",
      f"empirical order {est.order:.2f}")
