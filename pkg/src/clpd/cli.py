"""``clpd`` command line: data generation, training, reconstruction, checks, reports.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(divergence or a failed gradient check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .geometry import ExperimentSetting, make_geometry
from .io import read_f32, write_f32, write_pgm16

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("clpd")

METHODS = ("fbp", "pdhg", "lpd", "clpd")
VARIANT_OF_METHOD = {"lpd": "discrete", "clpd": "continuous"}

# Desk-scale defaults; every key can be changed with --config or --set.
DEFAULT_CONFIG: dict = {
    "setting": "sparse_clinical",
    "image_size": 64,
    "variant": "continuous",
    "seed": 0,
    "precision": "f32",
    "model": {
        "num_iterations": 5,
        "num_primal_channels": 5,
        "num_dual_channels": 5,
        "hidden_channels": 16,
        "kernel_size": 3,
        "normalize": "auto",
        "num_groups": 4,
        "time_conditioning": False,
        "adjoint": False,
        "ode": {"method": "euler", "num_steps": 2, "t0": 0.0, "t1": 1.0},
    },
    "train": {"batch_size": 2, "learning_rate": 1e-4, "num_epochs": 20, "train_size": 200, "test_size": 40},
    "pdhg": {"num_iterations": 200, "regularization_weight": 0.0, "rho": 1.0},
    "evaluate": {"num_dumps": 4, "batch_size": 8},
    "paths": {"output": "runs", "data": "", "lpd": "", "clpd": "", "input": ""},
}


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {name!r} must be a table")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(raw)
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def resolve_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    precision: str | None = None,
    output: str | None = None,
) -> dict:
    """Defaults, then the config file, then ``--set`` pairs, then dedicated flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        _merge(cfg, load_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        *parents, leaf = key.strip().split(".")
        update: dict = {leaf: _parse_value(text)}
        for parent in reversed(parents):
            update = {parent: update}
        _merge(cfg, update)
    if seed is not None:
        cfg["seed"] = seed
    if precision is not None:
        cfg["precision"] = precision
    if output is not None:
        cfg["paths"]["output"] = output
    ExperimentSetting.parse(cfg["setting"])
    if cfg["variant"] not in VARIANT_OF_METHOD.values():
        raise ConfigurationError(f"variant must be 'discrete' or 'continuous', got {cfg['variant']!r}")
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigurationError(f"precision must be f32 or f64, got {cfg['precision']!r}")
    return cfg


def unrolled_config(cfg: dict, variant: str | None = None):
    from .models import UnrolledConfig

    m = dict(cfg["model"])
    if m["normalize"] == "auto":
        m["normalize"] = None
    return UnrolledConfig.from_dict({**m, "variant": variant or cfg["variant"]})


def train_config(cfg: dict):
    from .experiments import TrainConfig

    return TrainConfig(seed=int(cfg["seed"]), **cfg["train"])


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


class Run:
    """Resolved config plus output-path bookkeeping for one invocation."""

    def __init__(self, cfg: dict, overwrite: bool):
        self.cfg = cfg
        self.overwrite = overwrite
        self.out = Path(cfg["paths"]["output"])
        self.setting = ExperimentSetting.parse(cfg["setting"])

    def target(self, *parts: str) -> Path:
        path = self.out.joinpath(*parts)
        if path.exists() and not self.overwrite:
            raise FileExistsError(f"{path} exists; pass --overwrite to replace it")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def announce(self, path: Path) -> Path:
        print(f"wrote {path}")
        return path

    def data_dir(self) -> Path:
        return self.out / "data" / self.setting.value

    def train_dir(self, variant: str) -> Path:
        return self.out / "train" / self.setting.value / variant

    def dataset(self):
        from .experiments import Dataset, build_dataset

        explicit = self.cfg["paths"]["data"]
        for candidate in ([Path(explicit)] if explicit else []) + [self.data_dir()]:
            if (candidate / "dataset.json").exists():
                ds = Dataset.load(candidate)
                log.info("dataset: %s", candidate)
                if ds.setting != self.setting:
                    raise ConfigurationError(f"{candidate} holds {ds.setting.value}, config asks for {self.setting.value}")
                return ds
        if explicit:
            raise FileNotFoundError(f"no dataset at {explicit}")
        t = self.cfg["train"]
        log.info("dataset: generated in memory (seed %d)", self.cfg["seed"])
        return build_dataset(
            self.setting, int(self.cfg["image_size"]), (t["train_size"], t["test_size"]), int(self.cfg["seed"])
        )

    def checkpoint(self, variant: str) -> Path | None:
        key = "clpd" if variant == "continuous" else "lpd"
        explicit = self.cfg["paths"][key]
        if explicit:
            return Path(explicit)
        default = self.train_dir(variant) / "model.ckpt"
        return default if default.exists() else None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> int:
    from .experiments import build_dataset

    t = run.cfg["train"]
    ds = build_dataset(run.setting, int(run.cfg["image_size"]), (t["train_size"], t["test_size"]), int(run.cfg["seed"]))
    directory = run.data_dir() if not run.cfg["paths"]["data"] else Path(run.cfg["paths"]["data"])
    if (directory / "dataset.json").exists() and not run.overwrite:
        raise FileExistsError(f"{directory} already holds a dataset; pass --overwrite to replace it")
    for path in ds.save(directory):
        run.announce(path)
    # a single noisy test sinogram, handy as `reconstruct` input
    run.announce(write_f32(directory / "example_sinogram.f32", ds.test_sinograms[0]))
    return 0


def cmd_train(run: Run, args) -> int:
    from .experiments import train
    from .models import LearnedPrimalDual

    variant = run.cfg["variant"]
    ds = run.dataset()
    model = LearnedPrimalDual(ds.geometry, unrolled_config(run.cfg), seed=int(run.cfg["seed"]), precision=run.cfg["precision"])
    directory = run.train_dir(variant)
    final = directory / "model.ckpt"
    if final.exists() and not (run.overwrite or args.resume):
        raise FileExistsError(f"{final} exists; pass --overwrite or --resume")
    log.info("training %s: %d parameters", variant, model.num_params())
    result = train(model, ds, train_config(run.cfg), out_dir=directory, resume=args.resume)
    for path in result.checkpoints:
        run.announce(path)
    run.announce(result.write_loss_curve(directory / "loss_curve.csv"))
    run.announce(model.save(final))
    return 0


def _read_sinogram(path: str) -> np.ndarray:
    if not path:
        raise ConfigurationError("reconstruct needs an input sinogram (--input or paths.input)")
    return read_f32(path).astype(np.float64)


def cmd_reconstruct(run: Run, args) -> int:
    from .models import LearnedPrimalDual
    from .operators import fbp
    from .optimization import PdhgConfig, pdhg_solve

    method = args.method
    y = _read_sinogram(args.input or run.cfg["paths"]["input"])
    stem = Path(args.input or run.cfg["paths"]["input"]).stem
    if method in VARIANT_OF_METHOD:
        ckpt = args.checkpoint or run.checkpoint(VARIANT_OF_METHOD[method])
        if ckpt is None:
            raise ConfigurationError(f"no {method} checkpoint; pass --checkpoint or train one first")
        model = LearnedPrimalDual.load(ckpt, precision=run.cfg["precision"])
        if model.variant != VARIANT_OF_METHOD[method]:
            raise ConfigurationError(f"{ckpt} holds a {model.variant} model, not {method}")
        g = model.geometry
        _check_sinogram(y, g)
        x = model.reconstruct(y).astype(np.float64)
        x = x[0] if y.ndim == 2 else x
    else:
        g = make_geometry(run.setting, int(run.cfg["image_size"]))
        _check_sinogram(y, g)
        if method == "fbp":
            x = fbp(y, g)
        else:
            p = run.cfg["pdhg"]
            pcfg = PdhgConfig.for_geometry(g, int(p["num_iterations"]), float(p["regularization_weight"]), float(p["rho"]))
            batch = y[None] if y.ndim == 2 else y
            results = [pdhg_solve(item, g, pcfg) for item in batch]
            x = np.stack([r.x for r in results])
            x = x[0] if y.ndim == 2 else x
            run.announce(results[0].write_trace(run.target("recon", f"{stem}_pdhg_trace.csv")))
    run.announce(write_f32(run.target("recon", f"{stem}_{method}.f32"), x))
    if x.ndim == 2:
        run.announce(write_pgm16(run.target("recon", f"{stem}_{method}.pgm"), x, 0.0, 1.0))
    return 0


def _check_sinogram(y: np.ndarray, g) -> None:
    if y.shape[-2:] != g.sinogram_shape or y.ndim not in (2, 3):
        raise ShapeError(f"sinogram shape {y.shape} does not match geometry {g.sinogram_shape}")


def cmd_evaluate(run: Run, args) -> int:
    from .experiments import VARIANT_NAMES, evaluate

    ds = run.dataset()
    models = {}
    for variant in ("continuous", "discrete"):
        ckpt = run.checkpoint(variant)
        if ckpt is not None:
            models[VARIANT_NAMES[variant]] = ckpt
            log.info("%s checkpoint: %s", VARIANT_NAMES[variant], ckpt)
    ev = run.cfg["evaluate"]
    csv_path = run.target("eval", f"{run.setting.value}.csv")
    dumps = run.out / "eval" / f"{run.setting.value}_images"
    report = evaluate(models, ds, batch_size=int(ev["batch_size"]), dump_dir=dumps, num_dumps=int(ev["num_dumps"]))
    run.announce(report.write_csv(csv_path))
    if int(ev["num_dumps"]) > 0:
        print(f"wrote reconstruction images under {dumps}")
    for algo in report.algorithms():
        a = report.aggregate(algo)
        print(f"{algo:<5} SSIM {a.ssim_mean:.4f} ± {a.ssim_std:.4f}   PSNR {a.psnr_mean:.2f} ± {a.psnr_std:.2f}")
    return 0


def cmd_gradcheck(run: Run, args) -> int:
    from .verification import run_all

    precision = args.precision or "f64"
    checks = run_all(precision=precision)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 2


def cmd_report(run: Run, args) -> int:
    from .experiments import EvalReport, render_table

    paths = [Path(p) for p in args.csv] or sorted((run.out / "eval").glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no evaluation CSVs given or found under {run.out / 'eval'}")
    report = EvalReport()
    for p in paths:
        report.extend(EvalReport.read_csv(p))
    target = run.target("report.md")
    table = render_table(report)
    print(table, end="")
    target.write_text(table)
    run.announce(target)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--output", help="output directory (default: paths.output)")

    parser = _Parser(prog="clpd", description="Learned primal-dual CT reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic train/test set")
    p = sub.add_parser("train", parents=[common], help="train an LPD or cLPD model")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct a sinogram file")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--input", help="float32 sinogram with JSON sidecar")
    p.add_argument("--checkpoint", help="model checkpoint for lpd/clpd")
    sub.add_parser("evaluate", parents=[common], help="SSIM/PSNR of FBP and trained models on the test split")
    sub.add_parser("gradcheck", parents=[common], help="gradient and solver self-checks (f64 unless --precision)")
    p = sub.add_parser("report", parents=[common], help="render evaluation CSVs as a table")
    p.add_argument("csv", nargs="*", help="evaluation CSVs (default: <output>/eval/*.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set, args.seed, args.precision, args.output)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        run = Run(cfg, args.overwrite)
        return COMMANDS[args.command](run, args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except NumericError as exc:
        print(f"clpd: numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"clpd: I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:  # configuration, shape and malformed-input errors
        print(f"clpd: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
