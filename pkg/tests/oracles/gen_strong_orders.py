"""Strong-convergence ratios for the two trajectory integrators.

Test equation: single-qubit dephasing (L = Z, rate gamma) with H = 0.5 Z,
whose linear unraveling solves in closed form per component:

    psi_0(t) = psi_0(0) exp(-i t / 2 + i sqrt(gamma) W_t)
    psi_1(t) = psi_1(0) exp(+i t / 2 - i sqrt(gamma) W_t)

(the -gamma/2 drift from L^dag L cancels the +gamma/2 Ito correction of the
imaginary diffusion, so only the terminal Brownian value enters).

Mean endpoint errors are printed for dt in {4e-3, 1e-3, 2.5e-4}; the
dt -> dt/4 ratios back the bounds asserted in tests/test_unravel.py
(strong order 0.5 doubles the error per quartering, order 1.0 quadruples it).
"""

import numpy as np

from qudiff import Hamiltonian, NoiseModel, SdeConfig, simulate_trajectory
from qudiff.rng import normal_stream

GAMMA = 0.5
N_PATHS = 200
SEED = 313


def exact_endpoint(psi0, w_total, t):
    up = psi0[0] * np.exp(-0.5j * t + 1j * np.sqrt(GAMMA) * w_total)
    dn = psi0[1] * np.exp(0.5j * t - 1j * np.sqrt(GAMMA) * w_total)
    return np.array([up, dn])


ham = Hamiltonian.default(1)
noise = NoiseModel(gamma_p=GAMMA)
psi0 = np.array([0.6, 0.8j], dtype=complex)

for integrator in ("euler_maruyama", "platen_srk"):
    errors = []
    for dt in (4e-3, 1e-3, 2.5e-4):
        cfg = SdeConfig(t_end=1.0, dt=dt, integrator=integrator, seed=SEED)
        errs = []
        for j in range(N_PATHS):
            traj = simulate_trajectory(psi0, ham, noise, cfg, trajectory_id=j)
            w = normal_stream(SEED, j, (cfg.n_steps, 1)).sum() * np.sqrt(cfg.dt_effective)
            errs.append(np.linalg.norm(traj.states[-1] - exact_endpoint(psi0, w, 1.0)))
        errors.append(float(np.mean(errs)))
    r1 = errors[0] / errors[1]
    r2 = errors[1] / errors[2]
    print(f"{integrator:15s} errors={[f'{e:.3e}' for e in errors]} ratios={r1:.2f}, {r2:.2f}")
