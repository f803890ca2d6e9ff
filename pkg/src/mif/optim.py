"""AdamW with decoupled weight decay and step-wise learning-rate decay."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NonFiniteError

OPT_MAGIC = b"MIFOPT1\x00"


@dataclass(frozen=True)
class OptConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    weight_decay: float = 1e-7
    milestones: tuple[int, ...] = (10_000, 50_000)
    decay: float = 0.1

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for m in self.milestones if iteration > m)
        return self.lr * self.decay ** passed


@dataclass
class OptState:
    cfg: OptConfig
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], cfg: OptConfig = OptConfig()) -> "OptState":
        return cls(cfg, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def to_bytes(self) -> bytes:
        b = io.BytesIO()
        b.write(OPT_MAGIC)
        c = self.cfg
        b.write(struct.pack("<q6dI", self.step, c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.decay,
                            len(c.milestones)))
        b.write(struct.pack(f"<{len(c.milestones)}q", *c.milestones))
        b.write(struct.pack("<I", len(self.m)))
        for m, v in zip(self.m, self.v):
            b.write(struct.pack("<I", m.ndim))
            b.write(struct.pack(f"<{m.ndim}Q", *m.shape))
            b.write(np.ascontiguousarray(m, "<f8").tobytes())
            b.write(np.ascontiguousarray(v, "<f8").tobytes())
        return b.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OptState":
        if not data.startswith(OPT_MAGIC):
            raise FormatError("bad optimizer section magic")
        b = io.BytesIO(data[len(OPT_MAGIC):])
        head = struct.Struct("<q6dI")
        step, lr, b1, b2, eps, wd, decay, nm = head.unpack(b.read(head.size))
        milestones = struct.unpack(f"<{nm}q", b.read(8 * nm))
        (n,) = struct.unpack("<I", b.read(4))
        ms, vs = [], []
        for _ in range(n):
            (nd,) = struct.unpack("<I", b.read(4))
            shape = struct.unpack(f"<{nd}Q", b.read(8 * nd))
            size = int(np.prod(shape)) * 8
            ms.append(np.frombuffer(b.read(size), "<f8").reshape(shape).astype(np.float64))
            vs.append(np.frombuffer(b.read(size), "<f8").reshape(shape).astype(np.float64))
        return cls(OptConfig(lr, b1, b2, eps, wd, tuple(milestones), decay), ms, vs, step)


def adamw_step(state: OptState, params: list[np.ndarray], grads: list[np.ndarray],
               iteration: int, rows: list | None = None) -> float:
    """One in-place AdamW update; returns the learning rate used.

    ``rows[i]``, when given and not None, restricts the update of parameter
    ``i`` to those leading-axis rows (sparse latent updates).
    """
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", iteration)
    c = state.cfg
    state.step += 1
    lr = c.lr_at(iteration)
    bc1 = 1.0 - c.beta1 ** state.step
    bc2 = 1.0 - c.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        sel = None if rows is None else rows[i]
        if sel is None:
            m, v, pv, gv = state.m[i], state.v[i], p, g
        else:
            m, v, pv, gv = state.m[i][sel], state.v[i][sel], p[sel], g[sel]
        m = c.beta1 * m + (1.0 - c.beta1) * gv
        v = c.beta2 * v + (1.0 - c.beta2) * gv * gv
        pv = pv * (1.0 - lr * c.weight_decay)
        pv = pv - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        if sel is None:
            state.m[i][...], state.v[i][...], p[...] = m, v, pv
        else:
            state.m[i][sel], state.v[i][sel], p[sel] = m, v, pv
    return lr
