"""Positional encoding + weight-normalized ReLU MLP decoding ``f(x; z)``.

The forward pass is expressed on :mod:`mif.autodiff` tensors.  When spatial
gradients are requested they are propagated forward (one tangent per axis)
through the same graph, so a single reverse pass differentiates losses on
``grad_p f`` with respect to parameters, latents and the query points.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError
from .geometry import Aabb, as_points
from .latent_octree import CORNER_OFFSETS, MISSING, InterpRecord, LatentOctree

DEC_MAGIC = b"MIFDEC1\x00"


@dataclass(frozen=True)
class PosEncConfig:
    num_frequencies: int = 10
    include_raw: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ConfigError("num_frequencies must be >= 1")

    @property
    def width(self) -> int:
        return 3 * (int(self.include_raw) + 2 * self.num_frequencies)


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 256
    num_layers: int = 4
    output_bias: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2 or self.hidden < 1:
            raise ConfigError("decoder needs >= 2 layers and hidden >= 1")


def sigmoid_alpha(x, alpha: float):
    """``tanh(alpha * x)``: the soft sign used by the sign and monotonicity losses."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    if isinstance(x, Tensor):
        return ad.tanh(x * alpha)
    return np.tanh(alpha * np.asarray(x, dtype=np.float64))


def _frequencies(cfg: PosEncConfig) -> np.ndarray:
    return (2.0 ** np.arange(cfg.num_frequencies)) * np.pi


def normalize_points(pts: np.ndarray, bounds: Aabb) -> np.ndarray:
    half = np.maximum(0.5 * bounds.extent, 1e-9)
    return (pts - bounds.center) / half


def positional_encode(p, cfg: PosEncConfig, bounds: Aabb | None = None) -> np.ndarray:
    """Per axis: [x̂], sin(2^k π x̂), cos(2^k π x̂) for k < L.

    ``x̂`` is ``p`` mapped to [-1, 1] by ``bounds``; without bounds ``p`` is
    taken as already normalized.
    """
    single = np.ndim(p) == 1
    x = as_points(p)
    if bounds is not None:
        x = normalize_points(x, bounds)
    a = x[:, :, None] * _frequencies(cfg)
    parts = ([x[:, :, None]] if cfg.include_raw else []) + [np.sin(a), np.cos(a)]
    out = np.concatenate(parts, axis=2).reshape(len(x), cfg.width)
    return out[0] if single else out


def positional_encode_jacobian(p, cfg: PosEncConfig, bounds: Aabb | None = None) -> np.ndarray:
    """d encoding / d p, shape (N, width, 3)."""
    x = as_points(p)
    scale = np.ones(3)
    if bounds is not None:
        scale = 1.0 / np.maximum(0.5 * bounds.extent, 1e-9)
        x = normalize_points(x, bounds)
    f = _frequencies(cfg)
    a = x[:, :, None] * f
    per_axis = ([np.ones_like(x[:, :, None])] if cfg.include_raw else []) + [np.cos(a) * f, -np.sin(a) * f]
    blocks = np.concatenate(per_axis, axis=2)          # (N, 3, 1+2L)
    k = blocks.shape[2]
    jac = np.zeros((len(x), 3, k, 3))
    for ax in range(3):
        jac[:, ax, :, ax] = blocks[:, ax, :] * scale[ax]
    return jac.reshape(len(x), 3 * k, 3)


@dataclass
class Layer:
    """Affine layer with weight ``W = g * V / ||V||`` (row-wise)."""

    v: np.ndarray   # (out, in)
    g: np.ndarray   # (out,)
    b: np.ndarray   # (out,)

    def weight(self) -> np.ndarray:
        return self.g[:, None] * self.v / np.linalg.norm(self.v, axis=1, keepdims=True)


@dataclass
class DecoderParams:
    layers: list[Layer]

    @classmethod
    def init(cls, in_dim: int, cfg: DecoderConfig = DecoderConfig()) -> "DecoderParams":
        rng = np.random.default_rng(cfg.init_seed)
        sizes = [in_dim] + [cfg.hidden] * (cfg.num_layers - 1) + [1]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            v = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(v, np.linalg.norm(v, axis=1), np.zeros(fan_out)))
        layers[-1].b[:] = cfg.output_bias
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].v.shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order (V, g, b per layer)."""
        return [a for l in self.layers for a in (l.v, l.g, l.b)]

    def names(self) -> list[str]:
        return [f"layer{i}.{n}" for i in range(len(self.layers)) for n in ("v", "g", "b")]

    def copy(self) -> "DecoderParams":
        return DecoderParams([Layer(l.v.copy(), l.g.copy(), l.b.copy()) for l in self.layers])


@dataclass
class FieldModel:
    decoder: DecoderParams
    tree: LatentOctree
    posenc: PosEncConfig
    bounds: Aabb
    alpha: float = 100.0

    def __post_init__(self):
        if self.decoder.in_dim != self.posenc.width + self.tree.dim:
            raise ConfigError(
                f"decoder input {self.decoder.in_dim} != posenc {self.posenc.width} + latent {self.tree.dim}")

    def parameters(self) -> list[np.ndarray]:
        return self.decoder.arrays() + self.tree.features

    def copy(self) -> "FieldModel":
        return FieldModel(self.decoder.copy(), self.tree.copy(), self.posenc, self.bounds, self.alpha)

    def __call__(self, points, chunk: int = 65536) -> np.ndarray:
        """Evaluate ``f`` at ``(N, 3)`` points without building gradients."""
        pts = as_points(points)
        out = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = field_forward(self, pts[s:s + chunk], track=False).values.data
        return out

    # -- serialization --------------------------------------------------

    def decoder_bytes(self) -> bytes:
        b = io.BytesIO()
        b.write(DEC_MAGIC)
        b.write(struct.pack("<I", len(self.decoder.layers)))
        for l in self.decoder.layers:
            b.write(struct.pack("<II", *l.v.shape))
            for a in (l.v, l.g, l.b):
                b.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        b.write(struct.pack("<IBd6d", self.posenc.num_frequencies, int(self.posenc.include_raw), self.alpha,
                            *self.bounds.min, *self.bounds.max))
        return b.getvalue()

    @staticmethod
    def parse_decoder(data: bytes):
        if not data.startswith(DEC_MAGIC):
            raise FormatError("bad decoder section magic")
        b = io.BytesIO(data[len(DEC_MAGIC):])
        (n,) = struct.unpack("<I", b.read(4))
        layers = []
        for _ in range(n):
            o, i = struct.unpack("<II", b.read(8))
            v = np.frombuffer(b.read(8 * o * i), "<f8").reshape(o, i).astype(np.float64)
            g = np.frombuffer(b.read(8 * o), "<f8").astype(np.float64)
            bias = np.frombuffer(b.read(8 * o), "<f8").astype(np.float64)
            layers.append(Layer(v, g, bias))
        tail = struct.Struct("<IBd6d")
        nf, raw, alpha, *bb = tail.unpack(b.read(tail.size))
        return DecoderParams(layers), PosEncConfig(nf, bool(raw)), alpha, Aabb(bb[:3], bb[3:])


# ---------------------------------------------------------------------------
# differentiable forward


@dataclass
class EvalTape:
    """Graph handles kept from one forward pass for the matching backward."""

    values: Tensor                      # (N,)
    point_grads: Tensor | None          # (n_grad, 3) spatial gradient of f, if requested
    points: Tensor
    latent: Tensor                      # (N, d) aggregated latent fed to the MLP
    params: list[Tensor] = field(default_factory=list)
    features: list[Tensor] = field(default_factory=list)
    record: InterpRecord | None = None


def _posenc_graph(xn: Tensor, cfg: PosEncConfig, inv_half: np.ndarray, n_grad: int):
    n = xn.shape[0]
    f = _frequencies(cfg)
    a = ad.reshape(xn, (n, 3, 1)) * f
    s, c = ad.sin(a), ad.cos(a)
    parts = ([ad.reshape(xn, (n, 3, 1))] if cfg.include_raw else []) + [s, c]
    enc = ad.reshape(ad.concat(parts, axis=2), (n, cfg.width))
    if not n_grad:
        return enc, None
    # tangent of the encoding along each world axis: only that axis' block is nonzero
    sel = np.zeros((3, 1, 3, 1))
    sel[[0, 1, 2], 0, [0, 1, 2], 0] = inv_half
    cs, ss = c[:n_grad], s[:n_grad]
    tparts = []
    if cfg.include_raw:
        tparts.append(Tensor(np.broadcast_to(sel, (3, n_grad, 3, 1)).copy()))
    tparts += [ad.reshape(cs, (1, n_grad, 3, cfg.num_frequencies)) * (sel * f),
               ad.reshape(ss, (1, n_grad, 3, cfg.num_frequencies)) * (sel * -f)]
    tan = ad.reshape(ad.concat(tparts, axis=3), (3 * n_grad, cfg.width))
    return enc, tan


def _latent_graph(tree: LatentOctree, pts: Tensor, rec: InterpRecord, feats: list[Tensor], n_grad: int):
    n = pts.shape[0]
    bits = CORNER_OFFSETS[None].astype(np.float64)       # (1, 8, 3)
    latent, tangent = None, None
    for lr, ft, lvl in zip(rec.levels, feats, range(tree.num_levels)):
        vox = np.floor(tree.grid_coords(pts.data, lvl))
        frac = (pts - tree.origin) * (1.0 / lr.voxel) - vox             # (N, 3)
        fr = ad.reshape(frac, (n, 1, 3))
        fac = fr * (2.0 * bits - 1.0) + (1.0 - bits)                    # bit ? u : 1-u
        f0, f1, f2 = fac[:, :, 0], fac[:, :, 1], fac[:, :, 2]
        w = f0 * f1 * f2                                                 # (N, 8)
        valid = lr.index != MISSING
        rows = ad.take_rows(ft, np.where(valid, lr.index, 0)) * valid[..., None]   # (N, 8, d)
        lat = ad.reshape(w, (n, 8, 1)) * rows
        lat = lat.sum(axis=1)
        latent = lat if latent is None else latent + lat
        if n_grad:
            sgn = (2.0 * bits - 1.0) / lr.voxel
            g0, g1, g2 = f0[:n_grad], f1[:n_grad], f2[:n_grad]
            dws = [g1 * g2 * sgn[:, :, 0], g0 * g2 * sgn[:, :, 1], g0 * g1 * sgn[:, :, 2]]
            r = rows[:n_grad]
            tans = [(ad.reshape(dw, (n_grad, 8, 1)) * r).sum(axis=1) for dw in dws]
            t = ad.concat(tans, axis=0)                                  # (3*n_grad, d)
            tangent = t if tangent is None else tangent + t
    return latent, tangent


def field_forward(model: FieldModel, points, n_grad: int = 0, track: bool = True,
                  points_grad: bool = False) -> EvalTape:
    """Evaluate ``f`` at ``points`` and, for the first ``n_grad`` of them, ``grad_p f``.

    With ``track`` the decoder weights and latent tables become graph leaves
    whose ``.grad`` fills on ``backward``; ``points_grad`` does the same for
    the query coordinates.
    """
    pts_np = as_points(points)
    n = len(pts_np)
    pts = Tensor(pts_np, requires_grad=points_grad)
    rec = model.tree.record(pts_np)
    params = [Tensor(a, requires_grad=track) for a in model.decoder.arrays()]
    feats = [Tensor(f, requires_grad=track) for f in model.tree.features]

    half = np.maximum(0.5 * model.bounds.extent, 1e-9)
    xn = (pts - model.bounds.center) * (1.0 / half)
    enc, enc_tan = _posenc_graph(xn, model.posenc, 1.0 / half, n_grad)
    latent, lat_tan = _latent_graph(model.tree, pts, rec, feats, n_grad)

    h = ad.concat([enc, latent], axis=1)
    tan = ad.concat([enc_tan, lat_tan], axis=1) if n_grad else None
    nl = len(model.decoder.layers)
    for i in range(nl):
        v, g, b = params[3 * i:3 * i + 3]
        w = ad.reshape(g, (-1, 1)) * v * ad.reciprocal(ad.norm(v, axis=1, keepdims=True))
        wt = ad.transpose(w)
        z = h @ wt + b
        if n_grad:
            tan = tan @ wt
        if i < nl - 1:
            mask = z.data > 0
            h = ad.relu(z)
            if n_grad:
                tan = tan * np.tile(mask[:n_grad], (3, 1))
        else:
            h = z
    values = ad.reshape(h, (n,))
    grads = ad.transpose(ad.reshape(tan, (3, n_grad))) if n_grad else None
    return EvalTape(values, grads, pts, latent, params, feats, rec)


def decode_forward(model: FieldModel, p):
    """Field value(s) at ``p`` plus the tape for :func:`decode_backward`."""
    single = np.ndim(p) == 1
    tape = field_forward(model, p, points_grad=True)
    vals = tape.values.data.copy()
    return (float(vals[0]) if single else vals), tape


def decode_backward(model: FieldModel, tape: EvalTape, upstream):
    """Reverse pass for ``sum(upstream * f)``.

    Returns ``(param_grads, latent_grad, point_grad)``: a dict of decoder
    gradients keyed like :meth:`DecoderParams.names` (latent tables under
    ``"features"``), the gradient w.r.t. the aggregated latent (N, d), and
    the spatial gradient (N, 3) through both the encoding and the trilinear
    latent dependence.
    """
    for t in [tape.values, tape.points, tape.latent] + tape.params + tape.features:
        t.grad = None
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), tape.values.shape)
    # the latent node is intermediate; give it a grad slot by walking from it
    tape.values.backward(up)
    n = tape.values.shape[0]

    def g(t, shape):
        return np.zeros(shape) if t.grad is None else np.array(t.grad)

    grads = {name: g(t, t.shape) for name, t in zip(model.decoder.names(), tape.params)}
    grads["features"] = [g(t, t.shape) for t in tape.features]
    latent_grad = g(tape.latent, (n, model.tree.dim))
    point_grad = g(tape.points, (n, 3))
    if np.ndim(upstream) == 0 and n == 1:
        latent_grad, point_grad = latent_grad[0], point_grad[0]
    return grads, latent_grad, point_grad


def build_model(tree: LatentOctree, bounds: Aabb, posenc: PosEncConfig = PosEncConfig(),
                decoder: DecoderConfig = DecoderConfig(), alpha: float = 100.0) -> FieldModel:
    params = DecoderParams.init(posenc.width + tree.dim, decoder)
    return FieldModel(params, tree, posenc, bounds, alpha)
