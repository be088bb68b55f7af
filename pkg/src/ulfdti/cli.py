"""``ulfdti`` command-line entry point.

Every subcommand reads its parameters from flags, optionally seeded by a JSON
``--config`` file (flags win), writes into ``--out`` and leaves a
``manifest.json`` there with the resolved config, seed and input hashes.
Exit codes: 0 ok, 2 usage, 3 format, 4 numerical.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text):
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be three integers, e.g. 32,32,32")
    return tuple(parts)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


# ---------------------------------------------------------------- parser

def _dwi_inputs(p):
    p.add_argument("--dwi", help="4-D NIfTI diffusion series")
    p.add_argument("--bvals", help="FSL b-value file")
    p.add_argument("--bvecs", help="FSL b-vector file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulfdti", description="Bias-corrected, superresolved DTI toolkit")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed (default 0)")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count (default 1)")
    parser.add_argument("--config", default=None, help="JSON config; explicit flags override it")
    # the same flags after the subcommand; SUPPRESS keeps absent ones from masking the top level
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    p = sub.add_parser("fit", help="log-linear tensor fit -> FA, ADC, V1, tensor maps")
    _dwi_inputs(p)
    p.add_argument("--out")
    p.add_argument("--weighted", type=_bool, default=None, help="one WLS pass after OLS")

    p = sub.add_parser("sh-fit", help="seven-channel SH sample (low-b + l<=2 coefficients)")
    _dwi_inputs(p)
    p.add_argument("--out")
    p.add_argument("--shell", type=float, default=None, help="b-value of the shell to fit")

    p = sub.add_parser("bias-correct", help="MAP direction-dependent bias correction")
    _dwi_inputs(p)
    p.add_argument("--atlas", help="atlas directory or atlas.json")
    p.add_argument("--out")
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=None)
    p.add_argument("--lambda-gm", dest="lambda_gm", type=float, default=None)
    p.add_argument("--adam-steps", dest="adam_steps", type=int, default=None)
    p.add_argument("--adam-lr", dest="adam_lr", type=float, default=None)
    p.add_argument("--lbfgs-iterations", dest="lbfgs_iterations", type=int, default=None)
    p.add_argument("--lowb-correction", dest="lowb_correction", type=_bool, default=None)

    p = sub.add_parser("degrade", help="ULF protocol degradation (resample, 9 directions, Rician)")
    _dwi_inputs(p)
    p.add_argument("--out")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--target-mm", dest="target_mm", type=float, default=None)
    p.add_argument("--directions", type=int, default=None)

    p = sub.add_parser("augment-preview", help="write HR/LR pairs drawn from the augmentation chain")
    p.add_argument("--sample", help="seven-channel SH NIfTI")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--crop", type=int, default=None, help="cubic crop edge in voxels")
    p.add_argument("--angular", type=_bool, default=None)
    p.add_argument("--augment-config", dest="augment_config", default=None)

    p = sub.add_parser("phantom", help="synthetic phantom DWI with optional injected bias")
    p.add_argument("--out")
    p.add_argument("--scene", default=None)
    p.add_argument("--dims", type=_dims, default=None)
    p.add_argument("--voxel-mm", dest="voxel_mm", type=float, default=None)
    p.add_argument("--protocol", choices=("ulf", "hardi"), default=None)
    p.add_argument("--bias", type=_bool, default=None, help="inject direction-dependent bias")
    p.add_argument("--noise", type=float, default=None, help="Rician sigma")
    p.add_argument("--spec", default=None, help="PhantomSpec JSON")

    p = sub.add_parser("train", help="train DiffSR-mini on SH samples")
    p.add_argument("--samples", nargs="*", default=None, help="seven-channel SH NIfTI files")
    p.add_argument("--lr-samples", dest="lr_samples", nargs="*", default=None,
                   help="optional co-registered poorer-acquisition SH files, one per sample")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iterations-per-epoch", dest="iterations_per_epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--base-features", dest="base_features", type=int, default=None)
    p.add_argument("--identity-task", dest="identity_task", type=_bool, default=None)
    p.add_argument("--augment-config", dest="augment_config", default=None)

    p = sub.add_parser("superresolve", help="run a trained model on a DWI or SH sample")
    p.add_argument("--model", help="checkpoint written by train")
    p.add_argument("--input", default=None, help="seven-channel SH NIfTI")
    _dwi_inputs(p)
    p.add_argument("--out")
    p.add_argument("--voxel-mm", dest="voxel_mm", type=float, default=None, help="target voxel size")
    p.add_argument("--tile", type=int, default=None)

    p = sub.add_parser("metrics", help="MAE / LNCC / V1 angular error between two volumes")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--mask", default=None)
    p.add_argument("--out")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--bval", type=float, default=None, help="b-value for SH-derived V1")
    return parser


DEFAULTS = {
    "fit": {"weighted": False},
    "sh-fit": {"shell": None},
    "bias-correct": {},
    "degrade": {"sigma": None, "target_mm": None, "directions": None},
    "augment-preview": {"count": 4, "crop": 32, "angular": True, "augment_config": None},
    "phantom": {"scene": "curved_bundle", "dims": None, "voxel_mm": None, "protocol": "ulf",
                "bias": True, "noise": 0.0, "spec": None},
    "train": {"samples": None, "lr_samples": None, "augment_config": None},
    "superresolve": {"input": None, "voxel_mm": None, "tile": None},
    "metrics": {"mask": None, "window": 10, "bval": 1000.0},
}
GLOBAL_DEFAULTS = {"seed": 0, "threads": 1}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- config file (top level, then the subcommand section) <- explicit flags."""
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(DEFAULTS.get(args.command, {}))
    if args.config:
        from .errors import ParseError, UsageError
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ParseError(f"{path}: config must be a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in data.items() if k not in DEFAULTS})
        section = data.get(args.command, {})
        if not isinstance(section, dict):
            raise ParseError(f"{path}: section {args.command!r} must be an object")
        cfg.update({k.replace("-", "_"): v for k, v in section.items()})
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = v
    if isinstance(cfg.get("dims"), list):
        cfg["dims"] = tuple(cfg["dims"])
    return cfg


# ---------------------------------------------------------------- helpers

class Run:
    """Collects inputs and outputs of one invocation and writes the manifest."""

    def __init__(self, command: str, cfg: dict):
        from .errors import UsageError
        self.command = command
        self.cfg = cfg
        if not cfg.get("out"):
            raise UsageError(f"{command}: --out is required")
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, dict] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}

    def input(self, name: str, path) -> Path:
        from .errors import UsageError
        from .volume_io import file_sha256
        if path is None:
            raise UsageError(f"{self.command}: --{name.replace('_', '-')} is required")
        p = Path(path)
        if not p.exists():
            raise UsageError(f"{self.command}: input not found: {p}")
        digest = file_sha256(p) if p.is_file() else _dir_digest(p)
        self.inputs[name] = {"path": str(p), "sha256": digest}
        return p

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self) -> Path:
        import numpy
        import scipy
        from . import __version__
        manifest = {
            "command": self.command,
            "seed": self.cfg.get("seed"),
            "threads": self.cfg.get("threads"),
            "config": {k: _jsonable(v) for k, v in sorted(self.cfg.items())},
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "versions": {"ulfdti": __version__, "numpy": numpy.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
            **self.extra,
        }
        p = self.out / MANIFEST
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def _dir_digest(path: Path) -> str:
    import hashlib
    from .volume_io import file_sha256
    h = hashlib.sha256()
    for f in sorted(x for x in path.rglob("*") if x.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(file_sha256(f).encode())
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


def _load_dwi(run: Run, cfg: dict):
    from .errors import FormatError
    from .volume_io import DwiDataset, parse_gradient_table, read_nifti
    dwi = run.input("dwi", cfg.get("dwi"))
    bvals = run.input("bvals", cfg.get("bvals"))
    bvecs = run.input("bvecs", cfg.get("bvecs"))
    vol = read_nifti(dwi)
    table = parse_gradient_table(bvals, bvecs)
    try:
        return DwiDataset(vol, table)
    except FormatError:
        raise
    except Exception as exc:
        exc.args = (f"{dwi}: {exc}",) + exc.args[1:]
        raise


def _write_dwi(run: Run, dataset, stem: str = "dwi"):
    from .volume_io import Volume, write_gradient_table, write_nifti
    write_nifti(Volume(dataset.grid, dataset.data, dataset.volume.description), run.path(f"{stem}.nii"))
    write_gradient_table(dataset.gradients, run.path(f"{stem}.bval"), run.path(f"{stem}.bvec"))


# ---------------------------------------------------------------- subcommands

def cmd_fit(cfg: dict) -> Run:
    import numpy as np
    from .tensor import fit_tensor_loglinear, tensor_metrics
    from .volume_io import Volume, write_nifti
    run = Run("fit", cfg)
    ds = _load_dwi(run, cfg)
    tensor, log_s0 = fit_tensor_loglinear(ds.data, ds.gradients, weighted=bool(cfg["weighted"]))
    m = tensor_metrics(tensor)
    g = ds.grid
    write_nifti(Volume(g, tensor, "tensor xx,yy,zz,xy,xz,yz"), run.path("tensor.nii"))
    write_nifti(Volume(g, m.fa, "FA"), run.path("fa.nii"))
    write_nifti(Volume(g, m.adc, "ADC"), run.path("adc.nii"))
    write_nifti(Volume(g, m.v1, "V1"), run.path("v1.nii"))
    write_nifti(Volume(g, np.exp(log_s0), "fitted S0"), run.path("s0.nii"))
    return run


def cmd_sh_fit(cfg: dict) -> Run:
    from .sample import dwi_to_sh_sample
    from .volume_io import write_nifti
    run = Run("sh-fit", cfg)
    ds = _load_dwi(run, cfg)
    sample = dwi_to_sh_sample(ds, cfg.get("shell"))
    write_nifti(sample.to_volume(), run.path("sh.nii"))
    return run


def cmd_bias_correct(cfg: dict) -> Run:
    import numpy as np
    from .bias import AtlasPriors, CorrectionConfig, DctBiasBasis, optimize_bias
    from .errors import UsageError
    from .volume_io import Volume, write_nifti
    run = Run("bias-correct", cfg)
    ds = _load_dwi(run, cfg)
    atlas = AtlasPriors.load(run.input("atlas", cfg.get("atlas")))
    if not atlas.grid.same_as(ds.grid):
        raise UsageError("atlas grid differs from the DWI grid; register the atlas first")
    config = CorrectionConfig.from_dict(cfg)
    res = optimize_bias(ds, atlas, config)
    _write_dwi(run, res.corrected, "corrected")
    basis = DctBiasBasis(ds.grid.dims)
    fields = np.exp(basis.values @ res.coefficients.values.T)
    write_nifti(Volume(ds.grid, fields, "exp(zeta_i) per DW entry"), run.path("bias_fields.nii"))
    if res.lowb_field is not None:
        write_nifti(Volume(ds.grid, res.lowb_field, "low-b log field"), run.path("lowb_field.nii"))
    run.path("coefficients.json").write_text(json.dumps({
        "dw_indices": list(map(int, res.coefficients.dw_indices)),
        "coefficients": res.coefficients.values.tolist(),
        "status": res.status,
        "objective": res.objective,
        "adam_history": res.adam_history,
        "lbfgs_history": res.lbfgs_history,
    }, indent=2))
    run.extra["status"] = res.status
    return run


def cmd_degrade(cfg: dict) -> Run:
    import numpy as np
    from .augment import ULF_N_DIRECTIONS, ULF_RICIAN_SIGMA, ULF_TARGET_MM, ulf_degrade_protocol
    run = Run("degrade", cfg)
    ds = _load_dwi(run, cfg)
    out = ulf_degrade_protocol(
        ds, np.random.default_rng(cfg["seed"]),
        sigma=ULF_RICIAN_SIGMA if cfg.get("sigma") is None else cfg["sigma"],
        target_mm=ULF_TARGET_MM if cfg.get("target_mm") is None else cfg["target_mm"],
        n_directions=ULF_N_DIRECTIONS if cfg.get("directions") is None else cfg["directions"])
    _write_dwi(run, out, "degraded")
    return run


def cmd_augment_preview(cfg: dict) -> Run:
    import numpy as np
    from dataclasses import replace
    from .augment import AugmentConfig, augment_chain
    from .sample import ShSample
    from .volume_io import read_nifti, write_nifti
    run = Run("augment-preview", cfg)
    sample = ShSample.from_volume(read_nifti(run.input("sample", cfg.get("sample"))))
    aug = AugmentConfig.load(run.input("augment_config", cfg["augment_config"])) \
        if cfg.get("augment_config") else AugmentConfig()
    crop = min(int(cfg["crop"]), *sample.grid.dims)
    aug = replace(aug, crop_size=(crop,) * 3, seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    draws = []
    for k in range(int(cfg["count"])):
        hr, lr, params, _ = augment_chain(sample, aug, rng, angular=bool(cfg["angular"]))
        write_nifti(hr.to_volume(), run.path(f"hr_{k:03d}.nii"))
        write_nifti(lr.to_volume(), run.path(f"lr_{k:03d}.nii"))
        draws.append({"crop_start": list(params.crop_start), "target_mm": params.target_mm,
                      "noise_sigma": params.noise_sigma})
    run.extra["draws"] = draws
    return run


def cmd_phantom(cfg: dict) -> Run:
    import numpy as np
    from .phantom import (PhantomSpec, hardi_gradient_table, make_injected_bias,
                          make_synthetic_atlas, make_tensor_field, synthesize_dwi,
                          ulf_gradient_table)
    from .volume_io import Volume, write_nifti
    run = Run("phantom", cfg)
    if cfg.get("spec"):
        spec = PhantomSpec.load(run.input("spec", cfg["spec"]))
    else:
        kw = {"scene": cfg["scene"], "seed": cfg["seed"]}
        if cfg.get("dims"):
            kw["dims"] = tuple(cfg["dims"])
        if cfg.get("voxel_mm"):
            kw["voxel_mm"] = cfg["voxel_mm"]
        spec = PhantomSpec(**kw)
    ph = make_tensor_field(spec)
    table = ulf_gradient_table() if cfg["protocol"] == "ulf" else hardi_gradient_table()
    rng = np.random.default_rng(cfg["seed"])
    bias = make_injected_bias(ph.grid, table, rng) if cfg["bias"] else None
    ds = synthesize_dwi(ph.tensors, table, ph.s0, bias=bias, rician_sigma=float(cfg["noise"]), rng=rng)
    _write_dwi(run, ds, "dwi")
    g = ph.grid
    write_nifti(Volume(g, ph.tensors.tensors, "true tensor"), run.path("truth_tensor.nii"))
    write_nifti(Volume(g, ph.labels.astype(np.int16), "labels 1 WM 2 GM 3 CSF"), run.path("labels.nii"))
    if bias is not None:
        write_nifti(Volume(g, bias.true_log_bias(ph.tensors, table), "true log-bias per DW entry"),
                    run.path("true_log_bias.nii"))
    make_synthetic_atlas(ph.tensors, ph.labels).save(run.out / "atlas")
    run.outputs += ["atlas/atlas.nii", "atlas/atlas.json"]
    run.path("phantom.json").write_text(spec.to_json())
    return run


def cmd_train(cfg: dict) -> Run:
    from .augment import AugmentConfig
    from .errors import NumericalError, UsageError
    from .net.loss import LossWeights
    from .net.model import MiniUNetConfig
    from .net.train import TrainConfig, train, write_history_csv
    from .sample import ShSample
    from .volume_io import read_nifti
    run = Run("train", cfg)
    paths = cfg.get("samples") or []
    if not paths:
        raise UsageError("train: --samples needs at least one SH NIfTI")
    samples = [ShSample.from_volume(read_nifti(run.input(f"sample_{i}", p))) for i, p in enumerate(paths)]
    lr_paths = cfg.get("lr_samples") or []
    if lr_paths and len(lr_paths) != len(paths):
        raise UsageError("train: --lr-samples needs one file per --samples entry")
    lr_sources = [ShSample.from_volume(read_nifti(run.input(f"lr_sample_{i}", p)))
                  for i, p in enumerate(lr_paths)] or None
    aug = AugmentConfig.load(run.input("augment_config", cfg["augment_config"])) \
        if cfg.get("augment_config") else AugmentConfig()
    net = MiniUNetConfig.from_dict(cfg)
    tc = TrainConfig.from_dict({**cfg, "seed": cfg["seed"]})
    loss = LossWeights.from_dict(cfg)
    try:
        model = train(samples, net, aug, tc, loss, checkpoint_path=run.out / "last_good.ckpt",
                      lr_sources=lr_sources)
    except NumericalError as exc:
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt is not None:
            write_history_csv(run.path("loss_history.csv"), ckpt.history)
            run.outputs.append("last_good.ckpt")
            run.extra["aborted"] = str(exc)
            run.write_manifest()
        raise
    model.save(run.path("model.ckpt"))
    write_history_csv(run.path("loss_history.csv"), model.history)
    run.extra["iterations"] = model.iterations_done
    return run


def cmd_superresolve(cfg: dict) -> Run:
    from .net.train import load_checkpoint, superresolve
    from .resample import resampled_grid
    from .sample import ShSample
    from .volume_io import read_nifti, write_nifti
    run = Run("superresolve", cfg)
    model = load_checkpoint(run.input("model", cfg.get("model")))
    if cfg.get("input"):
        source = ShSample.from_volume(read_nifti(run.input("input", cfg["input"])))
    else:
        source = _load_dwi(run, cfg)
    grid = source.grid
    target = resampled_grid(grid, cfg["voxel_mm"]) if cfg.get("voxel_mm") else grid
    out = superresolve(model, source, target, tile=cfg.get("tile"))
    write_nifti(out.to_volume(), run.path("sr.nii"))
    run.extra["output_grid"] = {"dims": list(out.grid.dims), "voxel_size": list(out.grid.voxel_size)}
    return run


def cmd_metrics(cfg: dict) -> Run:
    import numpy as np
    from .errors import UsageError
    from .sample import N_CHANNELS, sh_to_tensor
    from .stats import ResultRow, angular_error_v1, lncc, mae, write_results_csv
    from .tensor import tensor_metrics
    from .volume_io import read_nifti
    run = Run("metrics", cfg)
    a = read_nifti(run.input("pred", cfg.get("pred")))
    b = read_nifti(run.input("ref", cfg.get("ref")))
    if not a.grid.same_as(b.grid) or a.channels != b.channels:
        raise UsageError("pred and ref must share grid and channel count")
    mask = None
    if cfg.get("mask"):
        mask = read_nifti(run.input("mask", cfg["mask"])).data[..., 0] > 0
    da = a.data.astype(np.float64)
    db = b.data.astype(np.float64)
    rows = [ResultRow("mae", mae(da, db, mask))]
    for c in range(a.channels):
        rows.append(ResultRow(f"mae_ch{c}", mae(da[..., c], db[..., c], mask)))
        rows.append(ResultRow(f"lncc_ch{c}", lncc(da[..., c], db[..., c], int(cfg["window"]), mask)))
    if a.channels == 3:
        rows.append(ResultRow("v1_angular_error_deg", angular_error_v1(da, db, mask)))
    elif a.channels == N_CHANNELS:
        va = tensor_metrics(sh_to_tensor(da[..., 1:], cfg["bval"])).v1
        vb = tensor_metrics(sh_to_tensor(db[..., 1:], cfg["bval"])).v1
        rows.append(ResultRow("v1_angular_error_deg", angular_error_v1(va, vb, mask)))
    write_results_csv(run.path("metrics.csv"), rows)
    return run


COMMANDS = {
    "fit": cmd_fit,
    "sh-fit": cmd_sh_fit,
    "bias-correct": cmd_bias_correct,
    "degrade": cmd_degrade,
    "augment-preview": cmd_augment_preview,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "superresolve": cmd_superresolve,
    "metrics": cmd_metrics,
}


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    from .errors import FormatError, NumericalError, StateError, UlfDtiError, UsageError
    try:
        cfg = resolve_config(args)
        if int(cfg["threads"]) < 1:
            raise UsageError("--threads must be positive")
        _limit_threads(int(cfg["threads"]))
        run = COMMANDS[args.command](cfg)
        run.write_manifest()
    except UsageError as exc:
        print(f"ulfdti {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"ulfdti {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericalError, StateError) as exc:
        print(f"ulfdti {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UlfDtiError as exc:
        print(f"ulfdti {args.command}: error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_NUMERICAL)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"ulfdti {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ulfdti {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
