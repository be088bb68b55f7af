"""DiffSR-mini: icosphere graph-convolution blocks around a small 3-D U-Net.

Tensors are channels-first ``(batch, channels, X, Y, Z)``. Parameters live in
an ordered ``dict`` of numpy arrays; forward functions receive the matching
autodiff leaves so gradients come back keyed by name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import UsageError
from ..sh import build_icosphere

N_IO_CHANNELS = 7


@dataclass
class MiniUNetConfig:
    levels: int = 2
    base_features: int = 16
    global_tokens: int = 8
    ico_features: int = 8
    convs_per_level: int = 2

    def __post_init__(self):
        if self.levels < 1 or self.base_features < 1 or self.global_tokens < 1:
            raise UsageError("levels, features and token count must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MiniUNetConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------- graph convolution

@dataclass(frozen=True)
class GraphConvSpec:
    in_features: int
    out_features: int
    layer_norm: bool = True
    activation: bool = True


def graph_conv_params(prefix: str, spec: GraphConvSpec, rng, zero: bool = False) -> dict:
    fi, fo = spec.in_features, spec.out_features
    p = {
        f"{prefix}.w_v": np.array(1.0),
        f"{prefix}.w_n": np.array(0.5),
        f"{prefix}.W": np.zeros((fi, fo)) if zero else rng.normal(0, np.sqrt(2.0 / fi), (fi, fo)),
        f"{prefix}.b": np.zeros(fo),
    }
    if spec.layer_norm:
        p[f"{prefix}.ln_g"] = np.ones(fo)
        p[f"{prefix}.ln_b"] = np.zeros(fo)
    return p


def graph_conv_forward(p: dict, prefix: str, spec: GraphConvSpec, h, adjacency: np.ndarray):
    """GELU(LN{(w_v I + w_n/|KNN| A) (H W) + 1 b^T}) on ``h`` of shape ``(..., 42, F)``.

    The vertex mixing acts on the W-transformed features; LN is taken over
    the feature axis of each vertex.
    """
    hw = ad.matmul(h, p[f"{prefix}.W"])
    k = float(adjacency.sum(axis=1)[0])
    neigh = ad.axis_linear(hw, adjacency / k, axis=-2)
    out = p[f"{prefix}.w_v"] * hw + p[f"{prefix}.w_n"] * neigh + p[f"{prefix}.b"]
    if spec.layer_norm:
        out = ad.layer_norm(out, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"], axis=-1)
    if spec.activation:
        out = ad.gelu(out)
    return out


# ---------------------------------------------------------------- ico block

def ico_block_specs(features: int):
    return (GraphConvSpec(1, features, True, True), GraphConvSpec(features, 1, False, False))


def ico_block_params(prefix: str, features: int, rng) -> dict:
    s1, s2 = ico_block_specs(features)
    p = graph_conv_params(f"{prefix}.gc1", s1, rng)
    # the second layer starts at zero so the block starts as the projection roundtrip
    p.update(graph_conv_params(f"{prefix}.gc2", s2, rng, zero=True))
    return p


class IcoConstants:
    """Icosphere matrices cast to one dtype."""

    def __init__(self, dtype=np.float64):
        sphere = build_icosphere()
        self.projection = sphere.projection.astype(dtype)         # 6 x 42
        self.pinv = sphere.pinv.astype(dtype)                     # 6 x 42
        self.adjacency = sphere.adjacency().astype(dtype)


def ico_block_forward(p: dict, prefix: str, features: int, coeffs, consts: IcoConstants):
    """SH field ``(B, 6, X, Y, Z)`` -> project, two graph convolutions, deproject.

    The graph branch is added to the vertex amplitudes before deprojection:
    ``c' = P+ (h + GC2(GC1(h)))`` with ``h = P^T c``.
    """
    b, _, x, y, z = coeffs.shape
    flat = ad.transpose(coeffs, (0, 2, 3, 4, 1)).reshape(-1, 6)
    h = ad.matmul(flat, ad.Tensor(consts.projection))             # (V, 42)
    s1, s2 = ico_block_specs(features)
    g = graph_conv_forward(p, f"{prefix}.gc1", s1, h.reshape(-1, 42, 1), consts.adjacency)
    g = graph_conv_forward(p, f"{prefix}.gc2", s2, g, consts.adjacency)
    h2 = h + g.reshape(-1, 42)
    out = ad.matmul(h2, ad.Tensor(consts.pinv.T))                 # (V, 6)
    return ad.transpose(out.reshape(b, x, y, z, 6), (0, 4, 1, 2, 3))


# ---------------------------------------------------------------- U-Net

def _conv_params(name, cin, cout, rng, k=3, zero=False):
    fan = cin * k ** 3
    w = np.zeros((cout, cin, k, k, k)) if zero else rng.normal(0, np.sqrt(2.0 / fan), (cout, cin, k, k, k))
    return {f"{name}.w": w, f"{name}.b": np.zeros(cout)}


def unet_params(cfg: MiniUNetConfig, rng, prefix: str = "unet") -> dict:
    p = {}
    f = cfg.base_features
    cin = N_IO_CHANNELS
    for lvl in range(cfg.levels):
        cout = f * 2 ** lvl
        for j in range(cfg.convs_per_level):
            p.update(_conv_params(f"{prefix}.enc{lvl}.c{j}", cin if j == 0 else cout, cout, rng))
        cin = cout
    cb = f * 2 ** cfg.levels
    for j in range(cfg.convs_per_level):
        p.update(_conv_params(f"{prefix}.mid.c{j}", cin if j == 0 else cb, cb, rng))
    scale = 1.0 / np.sqrt(cb)
    p[f"{prefix}.attn.tokens"] = rng.normal(0, 1.0, (cfg.global_tokens, cb))
    for name in ("wq", "wk", "wv"):
        p[f"{prefix}.attn.{name}"] = rng.normal(0, scale, (cb, cb))
    p[f"{prefix}.attn.wo"] = rng.normal(0, 0.1 * scale, (cb, cb))
    cin = cb
    for lvl in reversed(range(cfg.levels)):
        cout = f * 2 ** lvl
        p[f"{prefix}.dec{lvl}.up.w"] = rng.normal(0, np.sqrt(1.0 / cin), (cin, cout, 2, 2, 2))
        p[f"{prefix}.dec{lvl}.up.b"] = np.zeros(cout)
        for j in range(cfg.convs_per_level):
            p.update(_conv_params(f"{prefix}.dec{lvl}.c{j}", 2 * cout if j == 0 else cout, cout, rng))
        cin = cout
    p[f"{prefix}.head.w"] = np.zeros((N_IO_CHANNELS, f))
    p[f"{prefix}.head.b"] = np.zeros(N_IO_CHANNELS)
    return p


def token_attention(p: dict, prefix: str, x):
    """Learned tokens cross-attend to the bottleneck voxels (tokens query, voxels key/value).

    ``x`` is ``(B, C, n)``. The mean token summary, projected by ``wo``, is
    broadcast-added to every voxel.
    """
    b, c, n = x.shape
    xt = ad.transpose(x, (0, 2, 1))                                   # (B, n, C)
    q = ad.matmul(p[f"{prefix}.tokens"], p[f"{prefix}.wq"])           # (T, C)
    k = ad.matmul(xt, p[f"{prefix}.wk"])
    v = ad.matmul(xt, p[f"{prefix}.wv"])
    logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(c))
    summary = ad.matmul(ad.softmax(logits, axis=-1), v)               # (B, T, C)
    ctx = ad.matmul(ad.mean(summary, axis=1), p[f"{prefix}.wo"])      # (B, C)
    return x + ctx.reshape(b, c, 1)


def _pad_zero(h, target):
    """Zero-pad the trailing spatial axes of ``h`` up to ``target``."""
    for ax in range(3):
        extra = target[ax] - h.shape[2 + ax]
        if extra:
            shape = list(h.shape)
            shape[2 + ax] = extra
            h = ad.concat([h, ad.Tensor(np.zeros(shape, dtype=h.dtype))], axis=2 + ax)
    return h


def mini_unet_forward(p: dict, cfg: MiniUNetConfig, x, prefix: str = "unet"):
    """Encoder, bottleneck with token attention, decoder with skips; 7 -> 7 channels.

    Spatial dims that are not multiples of ``2**levels`` are zero-padded at
    the high end and the output is cropped back.
    """
    if x.shape[1] != N_IO_CHANNELS:
        raise UsageError(f"U-Net expects {N_IO_CHANNELS} channels, got {x.shape[1]}")
    m = 2 ** cfg.levels
    dims = tuple(x.shape[2:])
    padded = tuple(-(-s // m) * m for s in dims)
    h = _pad_zero(x, padded) if padded != dims else x
    skips = []
    for lvl in range(cfg.levels):
        for j in range(cfg.convs_per_level):
            h = ad.gelu(ad.conv3d(h, p[f"{prefix}.enc{lvl}.c{j}.w"], p[f"{prefix}.enc{lvl}.c{j}.b"]))
        skips.append(h)
        h = ad.avg_pool2(h)
    for j in range(cfg.convs_per_level):
        h = ad.gelu(ad.conv3d(h, p[f"{prefix}.mid.c{j}.w"], p[f"{prefix}.mid.c{j}.b"]))
    b, c = h.shape[:2]
    sp = h.shape[2:]
    h = token_attention(p, f"{prefix}.attn", h.reshape(b, c, -1)).reshape((b, c) + sp)
    for lvl in reversed(range(cfg.levels)):
        h = ad.conv_transpose2(h, p[f"{prefix}.dec{lvl}.up.w"], p[f"{prefix}.dec{lvl}.up.b"])
        h = ad.concat([h, skips[lvl]], axis=1)
        for j in range(cfg.convs_per_level):
            h = ad.gelu(ad.conv3d(h, p[f"{prefix}.dec{lvl}.c{j}.w"], p[f"{prefix}.dec{lvl}.c{j}.b"]))
    out = ad.conv1x1(h, p[f"{prefix}.head.w"], p[f"{prefix}.head.b"])
    if padded != dims:
        out = out[:, :, :dims[0], :dims[1], :dims[2]]
    return out


# ---------------------------------------------------------------- full pipeline

def diffsr_params(cfg: MiniUNetConfig, rng) -> dict:
    p = ico_block_params("ico_in", cfg.ico_features, rng)
    p.update(unet_params(cfg, rng))
    p.update(ico_block_params("ico_out", cfg.ico_features, rng))
    return p


def diffsr_forward(p: dict, cfg: MiniUNetConfig, x, consts: IcoConstants):
    """ico-block (SH only) -> x + U-Net(x) -> ico-block (SH only); low-b bypasses the ico-blocks."""
    lowb = x[:, 0:1]
    sh = ico_block_forward(p, "ico_in", cfg.ico_features, x[:, 1:7], consts)
    h = ad.concat([lowb, sh], axis=1)
    h = h + mini_unet_forward(p, cfg, h)
    sh = ico_block_forward(p, "ico_out", cfg.ico_features, h[:, 1:7], consts)
    return ad.concat([h[:, 0:1], sh], axis=1)


def as_leaves(params: dict, dtype=None, requires_grad: bool = True) -> dict:
    return {k: ad.Tensor(v if dtype is None else v.astype(dtype), requires_grad)
            for k, v in params.items()}
