"""Periodic RVE, a strain path, and a POD basis built from it.

Run with ``python3 demos/01_rve_and_pod.py``. The porous RVE has a J2
matrix and stiff inclusions; a handful of POD modes reproduces its
fluctuation field along the training path.
"""
import numpy as np

from hyperfe2 import meshgen, rom, rve
from hyperfe2 import materials as M

mesh = meshgen.rve_with_pore()
mats = {0: M.J2Plasticity(1.0, 0.3, 0.01, 0.016), 1: M.LinearElastic(10.0, 0.3)}
micro = rve.MicroModel(mesh, mats)
print(f"RVE: {mesh.n_elements} elements, {micro.n} independent dofs, volume {micro.V:.3f}")

# a non-proportional path: tension, shear that reverses, then more tension
t = np.linspace(0.0, 1.0, 11)
path = rve.LoadPath(t, np.column_stack([0.02 * t, -0.01 * np.sin(np.pi * t), 0.015 * t ** 2]))
hf = rve.run_path(micro, path)
for k in (2, 5, 10):
    s = hf[k - 1].point.stress
    print(f"  t={t[k]:.1f}  stress = [{s[0]: .4e} {s[1]: .4e} {s[2]: .4e}]  newton its {hf[k - 1].iterations}")

Q = np.column_stack([s.q for s in hf])
sv = np.linalg.svd(Q, compute_uv=False)
print("singular values:", np.array2string(sv / sv[0], precision=2))

for n in (2, 4, 8):
    rm = rom.ReducedModel(micro, rom.pod(Q, n_modes=n))
    st, a, err = rm.init_states(), None, 0.0
    for k, s in enumerate(hf):
        a, pt, st = rom.reduced_solve(rm, st, path.values[k + 1], t[k + 1] - t[k], a0=a)
        err = max(err, np.abs(pt.stress - s.point.stress).max() / np.abs(s.point.stress).max())
    print(f"ROM with {n} modes: max relative stress error {err:.2e}")
