"""Implicit and ImplEx integration of the VEVP damage model.

A single material point is stretched along a ramp. ImplEx extrapolates
the internal variables, so each step is a linear update; its error against
the implicit solution shrinks linearly with the step size.

Run with ``python3 demos/03_vevp_implex.py``.
"""
import numpy as np

from hyperfe2 import materials as M

P = M.DEFAULT_VEVP
T, EMAX = 10.0, 0.03


def ramp(integ, N):
    mat = M.Vevp(**P, integration=integ)
    st = mat._init((1,))
    out = np.empty((N, 4))
    for k in range(1, N + 1):
        e = EMAX * k / N
        e4 = np.array([[e, -0.3 * e, 0.0, 0.5 * e]])
        if integ == "implicit":
            s, _, _, st = M.vevp_implicit_update(mat.solver, e4, st, T / N, tangent=False)
        else:
            s, _, _, st = M.vevp_implex_update(mat.solver, e4, st, T / N)
        out[k - 1] = s[0]
    return out, st


# the implicit scheme is itself first order: remove its leading error term
fine, st = ramp("implicit", 8192)
ref = 2.0 * fine[1::2] - ramp("implicit", 4096)[0]
print(f"implicit reference: final sigma_xx {ref[-1, 0]:.4f}, damage {float(st['d'][0]):.4f}")
prev = None
for N in (64, 128, 256, 512, 1024):
    s, _ = ramp("implex", N)
    dev = np.abs(s - ref[4096 // N - 1::4096 // N]).max() / np.abs(ref).max()
    rate = "" if prev is None else f"  ratio {prev / dev:.2f}"
    print(f"ImplEx N={N:>5}: deviation {dev:.3e}{rate}")
    prev = dev
