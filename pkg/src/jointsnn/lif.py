"""Leaky integrate-and-fire neurons with surrogate-gradient backward rules.

Forward dynamics per step::

    u_pre = tau * u + c
    y     = 1 if u_pre > v_th else 0
    u     = u_pre * (1 - y)          # hard reset

The step nonlinearity is replaced in the backward pass by a triangular or
rectangular surrogate. :func:`lif_step` composes generic autodiff ops and
is the readable reference; :func:`lif_forward` runs the whole time loop as
one tape node with hand-written BPTT and is what the networks use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.5
    v_th: float = 1.0
    surrogate: str = "triangular"  # or "rectangular"
    gamma: float = 1.0  # triangular peak height
    a: float = 1.0  # rectangular window width
    reset_detach: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.v_th <= 0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")
        if self.surrogate not in ("triangular", "rectangular"):
            raise ConfigError(f"unknown surrogate {self.surrogate!r}; expected 'triangular' or 'rectangular'")
        if self.gamma <= 0 or self.a <= 0:
            raise ConfigError("surrogate parameters gamma and a must be positive")


@dataclass
class LifState:
    u: Tensor
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "LifState":
        return cls(Tensor(np.zeros(shape)), 0)


def surrogate_array(u_pre: np.ndarray, cfg: LifConfig) -> np.ndarray:
    if cfg.surrogate == "triangular":
        return cfg.gamma * np.maximum(0.0, 1.0 - np.abs(u_pre / cfg.v_th - 1.0))
    return (np.abs(u_pre - cfg.v_th) < cfg.a / 2).astype(np.float64) / cfg.a


def surrogate_grad(u_pre: Tensor, cfg: LifConfig) -> Tensor:
    """Surrogate for d(spike)/d(u_pre), evaluated elementwise (not differentiable)."""
    return Tensor(surrogate_array(u_pre.data, cfg))


def fire(u_pre: Tensor, cfg: LifConfig) -> Tensor:
    """Heaviside spike with the configured surrogate as its backward rule."""
    spikes = (u_pre.data > cfg.v_th).astype(np.float64)
    sg = surrogate_array(u_pre.data, cfg)
    return ad._make("fire", spikes, (u_pre,), lambda g: (g * sg,))


def lif_step(state: LifState, c: Tensor, cfg: LifConfig) -> tuple[Tensor, LifState]:
    """Advance one time step. Returns the binary spikes and the new state."""
    if c.shape != state.u.shape:
        raise DimensionError(f"lif_step: input {c.shape} does not match state {state.u.shape}")
    u_pre = ad.add(ad.mul_scalar(state.u, cfg.tau), c)
    y = fire(u_pre, cfg)
    keep = ad.sub(Tensor(np.ones(y.shape)), y)
    if cfg.reset_detach:
        keep = ad.detach(keep)
    u = ad.mul(u_pre, keep)
    return y, LifState(u, state.t + 1)


def lif_forward(currents: Tensor, cfg: LifConfig, record: dict | None = None) -> Tensor:
    """Run LIF dynamics over the leading (time) axis of ``currents`` [T, ...].

    Starts from zero membrane potential. The backward pass unrolls the
    recurrence (BPTT) with the surrogate in place of d(spike)/d(u_pre).
    When ``record`` is a dict, the post-reset potentials are stored under
    ``"u"`` as an array [T, ...].
    """
    if currents.ndim < 1 or currents.shape[0] < 1:
        raise ConfigError("lif_forward needs at least one time step")
    c = currents.data
    steps = c.shape[0]
    u = np.zeros(c.shape[1:])
    u_pre_all = np.empty_like(c)
    spikes = np.empty_like(c)
    u_after = np.empty_like(c) if record is not None else None
    tau, v_th = cfg.tau, cfg.v_th
    for t in range(steps):
        u_pre = tau * u + c[t]
        y = (u_pre > v_th).astype(np.float64)
        u = u_pre * (1.0 - y)
        u_pre_all[t] = u_pre
        spikes[t] = y
        if u_after is not None:
            u_after[t] = u
    if record is not None:
        record["u"] = u_after

    def backward(g):
        sg = surrogate_array(u_pre_all, cfg)
        gc = np.empty_like(g)
        gu = np.zeros(g.shape[1:])  # dL/du_t arriving from step t+1
        for t in range(steps - 1, -1, -1):
            keep = 1.0 - spikes[t]
            g_pre = g[t] * sg[t] + gu * keep
            if not cfg.reset_detach:
                g_pre = g_pre - gu * u_pre_all[t] * sg[t]
            gc[t] = g_pre
            gu = tau * g_pre
        return (gc,)

    return ad._make("lif", spikes, (currents,), backward)


def lif_sequence(inputs: Sequence[Tensor], cfg: LifConfig) -> list[Tensor]:
    """List-of-steps wrapper around :func:`lif_forward`."""
    if not inputs:
        raise ConfigError("lif_sequence needs at least one time step")
    shapes = {x.shape for x in inputs}
    if len(shapes) != 1:
        raise DimensionError(f"lif_sequence: inputs have differing shapes {sorted(shapes)}")
    return ad.unstack(lif_forward(ad.stack(list(inputs)), cfg))


def integrate_head(currents: Sequence[Tensor]) -> Tensor:
    """Non-spiking readout: the time average of the output currents."""
    if not currents:
        raise ConfigError("integrate_head needs at least one time step")
    return ad.mean(ad.stack(list(currents)), axis=0)
