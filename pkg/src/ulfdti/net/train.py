"""Training loop, checkpoint format and tiled inference for DiffSR-mini."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..augment import AugmentConfig, augment_chain, draw_degrade_params, geometric_degrade_pair
from ..errors import CorruptionError, NumericalError, ParseError, StateError, UsageError
from ..optim import Adam
from ..resample import apply_axes, grid_to_grid_matrices
from ..sample import CHANNELS, L0, LOWB, SH, ShSample, dwi_to_sh_sample
from ..volume_io import DwiDataset, VolumeGrid
from .loss import LossWeights, SoftArgmax, composite_loss
from .model import IcoConstants, MiniUNetConfig, as_leaves, diffsr_forward, diffsr_params

MAGIC = b"ULFDTIW1"
HISTORY_COLUMNS = ("iteration", "epoch", "lr", "total", "lowb_l0_l2", "l2order_l1",
                   "angular", "consistency")


@dataclass
class TrainConfig:
    epochs: int = 100
    iterations_per_epoch: int = 20
    lr: float = 1e-4
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 10
    betas: tuple = (0.9, 0.95)
    patch_size: int = 16
    dtype: str = "float32"
    seed: int = 0
    identity_task: bool = False
    angular_augment: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.iterations_per_epoch < 1:
            raise UsageError("epochs and iterations per epoch must be positive")
        if self.lr <= 0 or self.warmup_start_lr <= 0 or self.warmup_epochs < 0:
            raise UsageError("learning rates must be positive and warm-up non-negative")
        if self.patch_size < 4:
            raise UsageError("patch size must be at least 4")
        if self.dtype not in ("float32", "float64"):
            raise UsageError("dtype must be float32 or float64")

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch

    def lr_at(self, epoch: float) -> float:
        """Linear warm-up from ``warmup_start_lr`` at epoch 0 to ``lr`` at ``warmup_epochs``."""
        if self.warmup_epochs == 0 or epoch >= self.warmup_epochs:
            return self.lr
        t = epoch / self.warmup_epochs
        return self.warmup_start_lr + (self.lr - self.warmup_start_lr) * t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainedModel:
    params: dict
    net: MiniUNetConfig = field(default_factory=MiniUNetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    trained: bool = False
    iterations_done: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def initialise(cls, net: MiniUNetConfig | None = None, loss: LossWeights | None = None,
                   train: TrainConfig | None = None) -> "TrainedModel":
        net = net or MiniUNetConfig()
        train = train or TrainConfig()
        params = diffsr_params(net, np.random.default_rng(train.seed))
        return cls(params, net, loss or LossWeights(), train)

    def copy(self) -> "TrainedModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       history=list(self.history))

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return load_checkpoint(path)


# ---------------------------------------------------------------- checkpoint I/O

def save_checkpoint(path, model: TrainedModel) -> None:
    """``MAGIC | uint64 header length | JSON header | float32 little-endian payload``."""
    header = {
        "format": "ulfdti-diffsr",
        "version": 1,
        "channels": list(CHANNELS),
        "net": model.net.to_dict(),
        "loss": model.loss.to_dict(),
        "train": model.train.to_dict(),
        "trained": model.trained,
        "iterations_done": model.iterations_done,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    raw = json.dumps(header).encode("utf-8")
    payload = b"".join(np.asarray(v, dtype="<f4").tobytes() for v in model.params.values())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(payload)


def load_checkpoint(path) -> TrainedModel:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ParseError(f"{path}: not a ulfdti checkpoint")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header: {exc}") from exc
    if tuple(header.get("channels", ())) != CHANNELS:
        raise CorruptionError(f"{path}: channel order {header.get('channels')} differs from {CHANNELS}")
    offset = 16 + n
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CorruptionError(f"{path}: payload truncated at {entry['name']}")
        params[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - offset} trailing bytes")
    for arr in params.values():
        if not np.all(np.isfinite(arr)):
            raise CorruptionError(f"{path}: non-finite parameters")
    return TrainedModel(params, MiniUNetConfig.from_dict(header["net"]),
                        LossWeights.from_dict(header["loss"]), TrainConfig.from_dict(header["train"]),
                        bool(header["trained"]), int(header.get("iterations_done", 0)))


def write_history_csv(path, history) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------- training

def _to_batch(sample: ShSample, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(sample.data, -1, 0)[None].astype(dtype))


def _draw_pair(samples, aug: AugmentConfig, cfg: TrainConfig, rng, lr_sources=None):
    k = int(rng.integers(len(samples)))
    src = samples[k]
    if cfg.identity_task:
        start = [int(rng.integers(0, d - c + 1)) for c, d in zip(aug.crop_size, src.grid.dims)]
        region = tuple(slice(a, a + c) for a, c in zip(start, aug.crop_size))
        hr = ShSample(VolumeGrid(aug.crop_size, src.grid.voxel_size, src.grid.affine), src.data[region])
        return hr, hr, None
    if lr_sources is not None:
        # paired mode: target from the sample, input chain from its LR source
        params = draw_degrade_params(src, aug, rng)
        _, lr, _, op = geometric_degrade_pair(lr_sources[k], aug, rng, params)
        region = tuple(slice(a, a + c) for a, c in zip(params.crop_start, aug.crop_size))
        return ShSample(lr.grid, src.data[region]), lr, op.full
    hr, lr, _, op = augment_chain(src, aug, rng, angular=cfg.angular_augment)
    return hr, lr, op.full


def train(samples, net: MiniUNetConfig | None = None, aug: AugmentConfig | None = None,
          train_config: TrainConfig | None = None, loss: LossWeights | None = None,
          model: TrainedModel | None = None, checkpoint_path=None, log=None,
          lr_sources=None) -> TrainedModel:
    """Adam on augmented patch pairs; returns a trained :class:`TrainedModel`.

    Each iteration draws one patch from a random sample, runs the
    degrade-augment chain, a forward pass and the composite loss. With
    ``identity_task`` the input is the undegraded patch itself. On a
    non-finite loss or gradient a :class:`NumericalError` is raised whose
    ``checkpoint`` attribute holds the last good model (also written to
    ``checkpoint_path`` when given).

    ``lr_sources`` optionally pairs each sample with a co-registered sample
    from a poorer acquisition, e.g. an SH fit to fewer directions. The
    geometric chain then degrades the LR source while the target is cropped
    from the sample; the HR-side angular steps are skipped.
    """
    if not samples:
        raise UsageError("training needs at least one sample")
    if lr_sources is not None:
        if len(lr_sources) != len(samples):
            raise UsageError("need one LR source per training sample")
        if any(s.grid.dims != t.grid.dims for s, t in zip(samples, lr_sources)):
            raise UsageError("LR sources must share their sample's grid")
    cfg = train_config or (model.train if model else TrainConfig())
    net = net or (model.net if model else MiniUNetConfig())
    loss = loss or (model.loss if model else LossWeights())
    aug = replace(aug or AugmentConfig(), crop_size=(cfg.patch_size,) * 3)
    for s in samples:
        if any(d < cfg.patch_size for d in s.grid.dims):
            raise UsageError(f"sample dims {s.grid.dims} smaller than patch {cfg.patch_size}")
    if model is None:
        model = TrainedModel(diffsr_params(net, np.random.default_rng(cfg.seed)), net, loss, cfg)
    model = model.copy()
    model.net, model.loss, model.train = net, loss, cfg
    dtype = np.dtype(cfg.dtype)
    consts = IcoConstants(dtype)
    sa = SoftArgmax(loss.fibonacci_count, loss.temperature, dtype)
    names = list(model.params)
    work = {k: model.params[k].astype(dtype) for k in names}
    opt = Adam(lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    last_good = model.copy()

    for it in range(cfg.iterations):
        epoch = it // cfg.iterations_per_epoch
        lr_now = cfg.lr_at(epoch)
        hr, lr_s, full = _draw_pair(samples, aug, cfg, rng, lr_sources)
        leaves = as_leaves(work)
        pred = diffsr_forward(leaves, net, ad.Tensor(_to_batch(lr_s, dtype)), consts)
        total, terms = composite_loss(pred, _to_batch(hr, dtype), _to_batch(lr_s, dtype), full, loss, sa)
        total.backward()
        grads = [leaves[k].grad if leaves[k].grad is not None else np.zeros_like(work[k]) for k in names]
        value = float(total.data)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good)
            err = NumericalError(f"non-finite loss or gradient at iteration {it}; "
                                 f"last good model after {last_good.iterations_done} iterations")
            err.checkpoint = last_good
            raise err
        opt.step([work[k] for k in names], grads, lr=lr_now)
        row = {"iteration": it, "epoch": epoch, "lr": lr_now, "total": value, **terms}
        model.history.append(row)
        model.iterations_done += 1
        if all(np.all(np.isfinite(work[k])) for k in names):
            model.params = {k: work[k].astype(np.float64) for k in names}
            last_good = model.copy()
        if log is not None:
            log(row)
    model.params = {k: work[k].astype(np.float64) for k in names}
    model.trained = True
    return model


# ---------------------------------------------------------------- inference

def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile + 1, step))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def _blend_profile(n: int) -> np.ndarray:
    """Tent weights, strictly positive so single-tile borders stay defined."""
    i = np.arange(n)
    return np.minimum(i + 1, n - i).astype(np.float64)


def predict(model: TrainedModel, data: np.ndarray, tile: int | None = None,
            overlap: int | None = None, halo: int | None = None) -> np.ndarray:
    """Run the network on a ``dims + (7,)`` array, tiled with tent-weighted overlap blending.

    Each tile is evaluated with up to ``halo`` voxels of real context on
    every side (default: half the tile) and only its centre is kept, so the
    zero padding of the convolutions does not reach the blended values.
    """
    dtype = np.dtype(model.train.dtype)
    consts = IcoConstants(dtype)
    leaves = as_leaves(model.params, dtype, requires_grad=False)
    dims = data.shape[:3]
    tile = tile or 2 * model.train.patch_size
    overlap = tile // 2 if overlap is None else overlap
    halo = tile // 2 if halo is None else halo
    if not 0 <= overlap < tile:
        raise UsageError("overlap must be in [0, tile)")
    if halo < 0:
        raise UsageError("halo must be non-negative")
    step = tile - overlap
    acc = np.zeros(data.shape, dtype=np.float64)
    wsum = np.zeros(dims, dtype=np.float64)
    starts = [_tile_starts(n, tile, step) for n in dims]
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                out_sl = tuple(slice(a, min(a + tile, n)) for a, n in zip((sx, sy, sz), dims))
                in_sl = tuple(slice(max(0, o.start - halo), min(n, o.stop + halo))
                              for o, n in zip(out_sl, dims))
                keep = tuple(slice(o.start - i.start, o.stop - i.start) for o, i in zip(out_sl, in_sl))
                x = np.ascontiguousarray(np.moveaxis(data[in_sl], -1, 0)[None].astype(dtype))
                y = diffsr_forward(leaves, model.net, ad.Tensor(x), consts).data[0]
                y = np.moveaxis(y, 0, -1)[keep].astype(np.float64)
                w = (_blend_profile(y.shape[0])[:, None, None]
                     * _blend_profile(y.shape[1])[None, :, None]
                     * _blend_profile(y.shape[2])[None, None, :])
                acc[out_sl] += y * w[..., None]
                wsum[out_sl] += w
    return acc / wsum[..., None]


def superresolve(model: TrainedModel, source, target_grid: VolumeGrid | None = None,
                 tile: int | None = None, overlap: int | None = None,
                 halo: int | None = None) -> ShSample:
    """Trilinear pre-upsample, network pass, then renormalisation to the input's global means.

    The low-b channel is rescaled to the input low-b mean; all SH channels
    share one factor that restores the input mean of the l=0 channel (the
    direction-averaged intensity).
    """
    if not model.trained:
        raise StateError("model parameters are untrained; run train or load a trained checkpoint")
    if isinstance(source, DwiDataset):
        source = dwi_to_sh_sample(source)
    if not isinstance(source, ShSample):
        raise UsageError("superresolve expects a DwiDataset or ShSample")
    target_grid = target_grid or source.grid
    up = apply_axes(source.data, grid_to_grid_matrices(source.grid, target_grid))
    out = predict(model, up, tile, overlap, halo)
    if not np.all(np.isfinite(out)):
        raise NumericalError("network produced non-finite output")
    out[..., LOWB] = np.maximum(out[..., LOWB], 0.0)
    in_lowb = float(source.data[..., LOWB].mean())
    out_lowb = float(out[..., LOWB].mean())
    if out_lowb > 0:
        out[..., LOWB] *= in_lowb / out_lowb
    in_l0 = float(source.data[..., L0].mean())
    out_l0 = float(out[..., L0].mean())
    if abs(out_l0) > 1e-12 and in_l0 / out_l0 > 0:
        out[..., SH] *= in_l0 / out_l0
    return ShSample(target_grid, out)
