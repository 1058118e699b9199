"""Finite-difference verification of the guidance gradient and warp adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import warping_energy, warping_energy_grad
from .motion import FlowField, FlowSet, MaskSet, OcclusionMask, warp_bilinear, warp_vjp
from .seqcore import Prng

ENERGY_GRAD_TOL = 1e-3
VJP_TOL = 1e-5


@dataclass
class CheckReport:
    energy_grad_max_rel: float
    vjp_max_rel: float
    static_grad_norm: float
    n_instances: int

    @property
    def passed(self) -> bool:
        return (
            self.energy_grad_max_rel < ENERGY_GRAD_TOL
            and self.vjp_max_rel < VJP_TOL
            and self.static_grad_norm < 1e-12
        )

    def lines(self) -> list:
        status = "PASS" if self.passed else "FAIL"
        return [
            f"instances={self.n_instances}",
            f"energy_grad_max_rel={self.energy_grad_max_rel:.3e} (tol {ENERGY_GRAD_TOL:.0e})",
            f"vjp_max_rel={self.vjp_max_rel:.3e} (tol {VJP_TOL:.0e})",
            f"static_grad_norm={self.static_grad_norm:.3e} (tol 1e-12)",
            f"result={status}",
        ]


def _random_instance(rng: Prng, n=3, c=1, h=8, w=8):
    z = rng.uniform(-1, 1, (n, c, h, w))
    flows = FlowSet(
        forward=[FlowField(rng.uniform(-1.5, 1.5, (2, h, w))) for _ in range(n - 1)],
        backward=[FlowField(rng.uniform(-1.5, 1.5, (2, h, w))) for _ in range(n - 1)],
    )
    masks = MaskSet(
        forward=[
            OcclusionMask((rng.uniform(0, 1, (1, h, w)) > 0.25).astype(float))
            for _ in range(n - 1)
        ],
        backward=[
            OcclusionMask((rng.uniform(0, 1, (1, h, w)) > 0.25).astype(float))
            for _ in range(n - 1)
        ],
    )
    return z, flows, masks


def energy_grad_max_rel(rng: Prng, n_instances: int = 50, corrupt: float = 0.0,
                        eps: float = 1e-3, h: float = 1e-4) -> float:
    """Max relative error of the analytic energy gradient vs full central FD."""
    worst = 0.0
    for _ in range(n_instances):
        z, flows, masks = _random_instance(rng)
        g = warping_energy_grad(z, flows, masks, eps)
        if corrupt:
            g = g + corrupt
        fd = np.zeros_like(g)
        flat = z.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = warping_energy(z, flows, masks, eps)
            flat[i] = orig - h
            down = warping_energy(z, flows, masks, eps)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * h)
        rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)
        worst = max(worst, rel)
    return worst


def vjp_max_rel(rng: Prng, n_instances: int = 50, corrupt: float = 0.0,
                h: float = 1e-4) -> float:
    """Max relative error of the warp adjoint vs FD directional probes."""
    worst = 0.0
    for _ in range(n_instances):
        c, hh, ww = 1, 6, 6
        x = rng.uniform(-1, 1, (c, hh, ww))
        u = rng.uniform(-1, 1, (c, hh, ww))
        f = FlowField(rng.uniform(-1.5, 1.5, (2, hh, ww)))
        g = warp_vjp(x, f, u)
        if corrupt:
            g = g + corrupt
        for _ in range(5):
            d = rng.uniform(-1, 1, x.shape)
            fd = (
                (warp_bilinear(x + h * d, f) * u).sum()
                - (warp_bilinear(x - h * d, f) * u).sum()
            ) / (2 * h)
            an = float((g * d).sum())
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-9))
    return worst


def static_instance_grad_norm() -> float:
    frame = np.linspace(-1, 1, 32).reshape(1, 2, 4, 4)[0]
    z = np.stack([frame, frame])
    flows = FlowSet(forward=[FlowField.zeros(4, 4)], backward=[FlowField.zeros(4, 4)])
    masks = MaskSet.full(1, 4, 4)
    g = warping_energy_grad(z, flows, masks, 1e-3)
    return float(np.abs(g).max())


def run_gradcheck(seed: int = 0, n_instances: int = 50, corrupt: float = 0.0) -> CheckReport:
    rng = Prng(seed)
    return CheckReport(
        energy_grad_max_rel=energy_grad_max_rel(rng.child("energy"), n_instances, corrupt),
        vjp_max_rel=vjp_max_rel(rng.child("vjp"), n_instances, corrupt),
        static_grad_norm=static_instance_grad_norm(),
        n_instances=n_instances,
    )
