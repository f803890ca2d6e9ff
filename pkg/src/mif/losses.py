"""Surface, sign, monotonicity and eikonal terms of the geometric loss.

All functions accept arrays or :class:`~mif.autodiff.Tensor` inputs and
return a scalar ``Tensor`` (``float(loss)`` gives the value).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import sigmoid_alpha
from .errors import ConfigError, EmptyInputError, NonFiniteError


@dataclass(frozen=True)
class LossWeights:
    lambda_eik: float = 0.1
    lambda_sign: float = 1.0
    lambda_mono: float = 1.0
    # 1.0 reproduces the unweighted surface term; 0 only for ablations
    lambda_surf: float = 1.0

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_sign, self.lambda_mono, self.lambda_surf) < 0:
            raise ConfigError("loss weights must be >= 0")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_surface(values) -> Tensor:
    """Mean ``|f|`` over the readings."""
    v = _as_tensor(values)
    if v.data.size == 0:
        raise EmptyInputError("surface loss needs at least one value")
    return ad.absolute(v).mean()


def loss_sign(values, residuals, alpha: float) -> Tensor:
    """Mean of ``1 - tanh(a f) tanh(a r)``: 0 when the soft signs agree."""
    v = _as_tensor(values)
    r = np.asarray(residuals.data if isinstance(residuals, Tensor) else residuals, dtype=np.float64)
    if v.shape != r.shape:
        raise ValueError(f"length mismatch: {v.shape} values vs {r.shape} residuals")
    if v.data.size == 0:
        raise EmptyInputError("sign loss needs at least one sample")
    return (1.0 - sigmoid_alpha(v, alpha) * sigmoid_alpha(r, alpha)).mean()


def loss_mono(ray_values, alpha: float) -> Tensor:
    """Two-level mean of ``1 - tanh(a (f_m - f_{m+1}))`` along each ray.

    ``ray_values`` is an (R, M) array/tensor of values sorted by ascending
    ``t``, or a list of per-ray sequences of varying length; rays with fewer
    than two samples contribute nothing.
    """
    if isinstance(ray_values, (list, tuple)):
        rays = [_as_tensor(r) for r in ray_values]
        rays = [r for r in rays if r.data.size >= 2]
        if not rays:
            raise EmptyInputError("every ray has fewer than two samples")
        terms = [_mono_rows(ad.reshape(r, (1, -1)), alpha) for r in rays]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))
    v = _as_tensor(ray_values)
    if v.ndim != 2 or v.shape[1] < 2 or v.shape[0] == 0:
        raise EmptyInputError("every ray has fewer than two samples")
    return _mono_rows(v, alpha)


def _mono_rows(v: Tensor, alpha: float) -> Tensor:
    delta = v[:, :-1] - v[:, 1:]
    per_ray = (1.0 - sigmoid_alpha(delta, alpha)).mean(axis=1)
    return per_ray.mean()


def loss_eikonal(gradients) -> Tensor:
    """Mean ``(||grad f|| - 1)^2`` over surface points."""
    g = _as_tensor(gradients)
    if g.data.size == 0:
        raise EmptyInputError("eikonal loss needs at least one gradient")
    g = ad.reshape(g, (-1, 3))
    return ((ad.norm(g, axis=1) - 1.0) ** 2).mean()


PARTS = ("surf", "sign", "mono", "eik")


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """``surf + l_eik eik + l_sign sign + l_mono mono``; missing parts count as 0."""
    coef = {"surf": weights.lambda_surf, "sign": weights.lambda_sign,
            "mono": weights.lambda_mono, "eik": weights.lambda_eik}
    total = Tensor(0.0)
    for name in PARTS:
        if name not in parts or parts[name] is None:
            continue
        p = _as_tensor(parts[name])
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"loss term {name} is not finite ({float(p.data)})")
        if coef[name] != 0:
            total = total + p * coef[name]
    return total
