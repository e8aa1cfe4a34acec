"""Training objectives.

Supervised runs minimize plain MSE against the reference. Self-supervised
runs combine a measurement-space unbiased risk estimate (data fidelity minus
the known noise energy plus a Monte Carlo divergence correction) with a
scale-equivariance regularizer, weighted by ``lam``:

    total = |A(f(y)) - y|^2 - N*sigma^2 + 2*sigma^2 * div + lam * eq

Norms in the risk term are sums over the N measurement elements so the noise
term is dimensionally consistent; the equivariance term is a mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError, SpecError
from .models import bicubic_resample
from .sensor import DegradationOperator, gaussian_kernel


@dataclass(frozen=True)
class SureCfg:
    """Noise level and Monte Carlo divergence settings.

    ``mc_step`` is relative: the probe step is ``mc_step * std(y)``.
    """

    sigma: float
    mc_probes: int = 1
    mc_step: float = 1e-3
    probe_dist: str = "rademacher"

    def __post_init__(self):
        if self.sigma < 0:
            raise SpecError("sigma must be nonnegative")
        if self.mc_probes < 1:
            raise SpecError("mc_probes must be >= 1")
        if self.mc_step <= 0:
            raise SpecError("mc_step must be positive")
        if self.probe_dist not in ("rademacher", "gaussian"):
            raise SpecError(f"unknown probe distribution {self.probe_dist!r}")


@dataclass(frozen=True)
class EqCfg:
    """Zoom-equivariance settings; ``margin`` border pixels are excluded."""

    factor: float = 2.0
    lam: float = 1.0
    margin: int = 0

    def __post_init__(self):
        if self.factor <= 1:
            raise SpecError("zoom factor must be > 1")
        if self.lam < 0:
            raise SpecError("lam must be nonnegative")
        if self.margin < 0:
            raise SpecError("margin must be nonnegative")


def mse_loss(xhat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if xhat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {tuple(xhat.shape)} vs {tuple(x.shape)}")
    return ((xhat - x) ** 2).mean()


def _draw_probe(shape, dist: str, generator, dtype, device) -> torch.Tensor:
    if dist == "rademacher":
        bits = torch.randint(0, 2, shape, generator=generator, device=device)
        return bits.to(dtype) * 2 - 1
    return torch.randn(shape, generator=generator, dtype=dtype, device=device)


def _mc_divergence(g, y: torch.Tensor, g0: torch.Tensor, cfg: SureCfg,
                   seed: int) -> torch.Tensor:
    gen = torch.Generator(device="cpu").manual_seed(seed)
    step = cfg.mc_step * max(float(y.detach().std()), 1e-12)
    est = y.new_zeros(())
    for _ in range(cfg.mc_probes):
        b = _draw_probe(y.shape, cfg.probe_dist, gen, y.dtype, y.device)
        gb = g(y + step * b)
        if not torch.isfinite(gb).all():
            raise FloatingPointError("non-finite output while probing the divergence")
        est = est + (b * (gb - g0)).sum() / step
    return est / cfg.mc_probes


def mc_divergence(g, y: torch.Tensor, cfg: SureCfg, seed: int) -> torch.Tensor:
    """Monte Carlo divergence of ``g`` at ``y``: the mean over probes b of
    ``<b, g(y + step*b) - g(y)> / step``. Deterministic for a given seed."""
    return _mc_divergence(g, y, g(y), cfg, seed)


def _sure_terms(f, y, A: DegradationOperator, cfg: SureCfg, seed: int):
    xhat = f(y)
    ay = A(xhat)
    if ay.shape != y.shape:
        raise ShapeError(
            f"A(f(y)) shape {tuple(ay.shape)} must equal y shape {tuple(y.shape)}"
        )
    fidelity = ((ay - y) ** 2).sum()
    n = y.numel()
    if cfg.sigma == 0:
        zero = y.new_zeros(())
        return xhat, fidelity, zero, zero
    penalty = -n * cfg.sigma**2 * torch.ones_like(fidelity)
    div = _mc_divergence(lambda v: A(f(v)), y, ay, cfg, seed)
    return xhat, fidelity, penalty, 2 * cfg.sigma**2 * div


def sure_loss(f, y: torch.Tensor, A: DegradationOperator, cfg: SureCfg,
              seed: int = 0) -> torch.Tensor:
    """Unbiased estimate of the measurement-space MSE; with sigma=0 this
    reduces to the pure data-fidelity term."""
    _, fidelity, penalty, div_term = _sure_terms(f, y, A, cfg, seed)
    return fidelity + penalty + div_term


_zoom_ops: dict = {}


def zoom_transform(x: torch.Tensor, factor: float = 2.0) -> torch.Tensor:
    """Anti-aliased spatial downscale by ``factor``.

    A Gaussian pre-blur of std ``0.5 * factor`` (border-renormalized, no
    padding content) precedes the bicubic resample; output size is H/factor.
    """
    if factor <= 1:
        raise SpecError("zoom factor must be > 1")
    _, h, w = x.shape
    out_h, out_w = h / factor, w / factor
    if abs(out_h - round(out_h)) > 1e-9 or abs(out_w - round(out_w)) > 1e-9:
        raise ShapeError(f"spatial size {h}x{w} not divisible by factor {factor}")
    op = _zoom_ops.get(factor)
    if op is None:
        op = DegradationOperator(gaussian_kernel(0.5 * factor, 0.5 * factor), scale=1)
        _zoom_ops[factor] = op
    return bicubic_resample(op.blur(x), int(round(out_h)), int(round(out_w)))


def eq_loss(f, xhat: torch.Tensor, A: DegradationOperator, cfg: EqCfg) -> torch.Tensor:
    """Scale-equivariance penalty.

    The reconstruction is zoomed, re-degraded, and reconstructed again; the
    zoomed image acts as a constant target (no gradient flows through the
    target branch). The squared error is averaged over the interior region.
    """
    xp = zoom_transform(xhat, cfg.factor)
    yp = A(xp)
    if min(yp.shape[-2:]) < 2:
        raise ConfigError(
            f"zoomed measurement {tuple(yp.shape)} too small; lower the zoom factor"
        )
    pred = f(yp)
    target = xp.detach()
    if cfg.margin:
        m = cfg.margin
        if 2 * m >= min(pred.shape[-2:]):
            raise ConfigError(f"margin {m} leaves no interior in {tuple(pred.shape)}")
        pred = pred[:, m:-m, m:-m]
        target = target[:, m:-m, m:-m]
    return ((pred - target) ** 2).mean()


def ssl_total(f, y: torch.Tensor, A: DegradationOperator, sure_cfg: SureCfg,
              eq_cfg: EqCfg, seed: int = 0):
    """Combined self-supervised objective; returns (total, term breakdown)."""
    xhat, fidelity, penalty, div_term = _sure_terms(f, y, A, sure_cfg, seed)
    sure = fidelity + penalty + div_term
    if eq_cfg.lam > 0:
        eq = eq_loss(f, xhat, A, eq_cfg)
    else:
        eq = y.new_zeros(())
    total = sure + eq_cfg.lam * eq
    breakdown = {
        "sure_fidelity": float(fidelity.detach()),
        "sure_penalty": float(penalty.detach()),
        "sure_div": float(div_term.detach()),
        "sure": float(sure.detach()),
        "eq": float(eq.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
