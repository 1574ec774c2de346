"""Synthetic datasets, the training loop and the evaluation grid.

Datasets pair random-ellipse phantoms with dose-noised sinograms. Train and
test phantoms and the noise draws come from three independent child seeds
of one ``numpy.random.SeedSequence``, so a single integer reproduces
everything and the splits never share a phantom seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .geometry import ExperimentSetting, ScanGeometry, make_geometry, random_ellipse_phantom
from .io import read_checkpoint, read_f32, write_f32, write_pgm16
from .metrics import MetricConfig, psnr, ssim
from .models import LearnedPrimalDual
from .nn_core import AdamState, adam_step
from .operators import DOSES, DoseLevel, apply_dose_noise, fbp, forward_project

log = logging.getLogger(__name__)

ALGORITHMS = ("cLPD", "LPD", "FBP")
VARIANT_NAMES = {"continuous": "cLPD", "discrete": "LPD"}


def setting_dose(setting: ExperimentSetting | str) -> DoseLevel:
    return DOSES[ExperimentSetting.parse(setting).dose_label]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Ground-truth images ``(N, n, n)`` with their noisy sinograms, per split."""

    setting: ExperimentSetting
    geometry: ScanGeometry
    train_images: np.ndarray
    train_sinograms: np.ndarray
    test_images: np.ndarray
    test_sinograms: np.ndarray
    seed: int = 0

    @property
    def image_size(self) -> int:
        return self.geometry.image_size

    def save(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [
            write_f32(directory / f"{name}.f32", getattr(self, name))
            for name in ("train_images", "train_sinograms", "test_images", "test_sinograms")
        ]
        meta = {"setting": self.setting.value, "geometry": self.geometry.to_dict(), "seed": self.seed}
        meta_path = directory / "dataset.json"
        meta_path.write_text(_dumps(meta))
        return paths + [meta_path]

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text())
        arrays = {
            name: read_f32(directory / f"{name}.f32").astype(np.float64)
            for name in ("train_images", "train_sinograms", "test_images", "test_sinograms")
        }
        return cls(
            setting=ExperimentSetting.parse(meta["setting"]),
            geometry=ScanGeometry.from_dict(meta["geometry"]),
            seed=int(meta.get("seed", 0)),
            **arrays,
        )


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _item_seeds(seq: np.random.SeedSequence, count: int) -> np.ndarray:
    return seq.generate_state(count, dtype=np.uint64)


def build_dataset(
    setting: ExperimentSetting | str,
    n: int = 64,
    sizes: tuple[int, int] = (200, 40),
    seed: int = 0,
    geometry: ScanGeometry | None = None,
) -> Dataset:
    """Phantoms, clean projections and per-item Poisson noise for ``setting``."""
    setting = ExperimentSetting.parse(setting)
    num_train, num_test = sizes
    if num_train < 1 or num_test < 1:
        raise ConfigurationError("dataset sizes must be at least 1")
    g = geometry or make_geometry(setting, n)
    if g.image_size != n:
        raise ConfigurationError(f"geometry is for n={g.image_size}, dataset asked for n={n}")
    train_seq, test_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    train_seeds = _item_seeds(train_seq, num_train)
    test_seeds = _item_seeds(test_seq, num_test)
    if np.intersect1d(train_seeds, test_seeds).size:
        raise RuntimeError("train and test phantom seeds collide; choose another seed")
    noise_seeds = _item_seeds(noise_seq, num_train + num_test)
    dose = setting_dose(setting)

    def split(seeds, noise):
        images = np.stack([random_ellipse_phantom(int(s), n) for s in seeds])
        clean = forward_project(images, g)
        noisy = np.stack([apply_dose_noise(c, dose, int(k)) for c, k in zip(clean, noise)])
        return images, noisy

    train_x, train_y = split(train_seeds, noise_seeds[:num_train])
    test_x, test_y = split(test_seeds, noise_seeds[num_train:])
    return Dataset(setting, g, train_x, train_y, test_x, test_y, seed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    num_epochs: int = 20
    seed: int = 0
    train_size: int = 200
    test_size: int = 40

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError("learning_rate must be a finite nonnegative number")
        if self.num_epochs < 0:
            raise ConfigurationError("num_epochs must be nonnegative")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigurationError("dataset sizes must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: LearnedPrimalDual
    epoch_losses: list[float]
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0

    def write_loss_curve(self, path: str | Path) -> Path:
        return write_loss_curve(path, self.epoch_losses)


def write_loss_curve(path: str | Path, losses: list[float]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(losses, start=1):
            w.writerow([epoch, repr(float(loss))])
    return path


def read_loss_curve(path: str | Path) -> list[float]:
    with Path(path).open(newline="") as fh:
        return [float(row["train_loss"]) for row in csv.DictReader(fh)]


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    # keyed on (seed, epoch) so a resumed run shuffles exactly like an uninterrupted one
    return np.random.default_rng([seed, epoch]).permutation(count)


def _save_training_state(path, model, adam, cfg, epoch, losses) -> Path:
    arrays = {f"adam.m.{k}": v for k, v in adam.m.items()}
    arrays.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    header = {
        "train_config": cfg.to_dict(),
        "epoch": epoch,
        "adam_step": adam.step,
        "epoch_losses": [float(x) for x in losses],
    }
    return model.save(path, extra_arrays=arrays, extra_header=header)


def _restore_training_state(path, model, adam):
    arrays, header = read_checkpoint(path)
    for name in model.params.names():
        model.params[name] = arrays[name].astype(model.dtype)
        adam.m[name] = arrays[f"adam.m.{name}"].astype(model.dtype)
        adam.v[name] = arrays[f"adam.v.{name}"].astype(model.dtype)
    adam.step = int(header["adam_step"])
    return int(header["epoch"]), list(header["epoch_losses"])


def train(
    model: LearnedPrimalDual,
    dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Adam on the MSE loss over seeded shuffles of the training split.

    With ``out_dir`` a checkpoint (parameters plus optimizer state) is
    written after every epoch as ``epoch_###.ckpt`` and as ``last.ckpt``.
    ``resume`` continues from such a checkpoint.
    """
    if model.geometry != dataset.geometry:
        raise ConfigurationError("model geometry does not match the dataset geometry")
    images, sinograms = dataset.train_images, dataset.train_sinograms
    count = images.shape[0]
    adam = AdamState.for_store(model.params, lr=cfg.learning_rate)
    start_epoch, losses = 0, []
    if resume is not None:
        start_epoch, losses = _restore_training_state(resume, model, adam)
        log.info("resumed from %s after epoch %d", resume, start_epoch)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    t_start = time.perf_counter()
    for epoch in range(start_epoch + 1, cfg.num_epochs + 1):
        order = _epoch_order(cfg.seed, epoch, count)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, count, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            try:
                loss, grads = model.loss_and_grad(sinograms[idx], images[idx])
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}", index=epoch) from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", index=epoch)
            adam_step(model.params, adam, grads)
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / seen)
        log.info("epoch %d/%d  train loss %.6g", epoch, cfg.num_epochs, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        if out is not None:
            path = _save_training_state(out / f"epoch_{epoch:03d}.ckpt", model, adam, cfg, epoch, losses)
            _save_training_state(out / "last.ckpt", model, adam, cfg, epoch, losses)
            checkpoints.append(path)
    return TrainResult(model, losses, checkpoints, time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    setting: str
    algorithm: str
    image: int
    ssim: float
    psnr: float


@dataclass(frozen=True)
class Aggregate:
    count: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def algorithms(self) -> list[str]:
        return list(dict.fromkeys(r.algorithm for r in self.rows))

    def settings(self) -> list[str]:
        return list(dict.fromkeys(r.setting for r in self.rows))

    def column(self, algorithm: str, metric: str, setting: str | None = None) -> np.ndarray:
        return np.array(
            [
                getattr(r, metric)
                for r in self.rows
                if r.algorithm == algorithm and (setting is None or r.setting == setting)
            ]
        )

    def aggregate(self, algorithm: str, setting: str | None = None) -> Aggregate:
        s = self.column(algorithm, "ssim", setting)
        p = self.column(algorithm, "psnr", setting)
        if s.size == 0:
            raise KeyError(f"no rows for {algorithm!r}")
        return Aggregate(int(s.size), float(s.mean()), float(s.std()), float(p.mean()), float(p.std()))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["setting", "algorithm", "image", "ssim", "psnr"])
            for r in self.rows:
                w.writerow([r.setting, r.algorithm, r.image, repr(r.ssim), repr(r.psnr)])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        with Path(path).open(newline="") as fh:
            rows = [
                EvalRow(d["setting"], d["algorithm"], int(d["image"]), float(d["ssim"]), float(d["psnr"]))
                for d in csv.DictReader(fh)
            ]
        return cls(rows)


def _batched(model: LearnedPrimalDual, sinograms: np.ndarray, batch: int) -> np.ndarray:
    return np.concatenate([model.reconstruct(sinograms[i : i + batch]) for i in range(0, len(sinograms), batch)])


def evaluate(
    models: Mapping[str, LearnedPrimalDual | str | Path],
    dataset: Dataset,
    batch_size: int = 8,
    dump_dir: str | Path | None = None,
    num_dumps: int = 0,
) -> EvalReport:
    """SSIM/PSNR of FBP and every given model on the test split.

    ``models`` maps an algorithm label (e.g. ``"cLPD"``) to a model or a
    checkpoint path. The metric range is each ground truth's max - min.
    """
    g = dataset.geometry
    recons = {"FBP": fbp(dataset.test_sinograms, g)}
    for label, m in models.items():
        if not isinstance(m, LearnedPrimalDual):
            m = LearnedPrimalDual.load(m)
        if m.geometry != g:
            raise ConfigurationError(f"{label} was trained for a different geometry than the test set")
        recons[label] = _batched(m, dataset.test_sinograms, batch_size).astype(np.float64)
    order = [a for a in ALGORITHMS if a in recons] + [a for a in recons if a not in ALGORITHMS]
    report = EvalReport()
    for algo in order:
        for i, (x, ref) in enumerate(zip(recons[algo], dataset.test_images)):
            if x.shape != ref.shape:
                raise ShapeError(f"{algo} output shape {x.shape} != {ref.shape}")
            cfg = MetricConfig.for_reference(ref)
            report.rows.append(EvalRow(dataset.setting.value, algo, i, ssim(x, ref, cfg), psnr(x, ref, cfg)))
    if dump_dir is not None and num_dumps > 0:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        for algo in order:
            for i in range(min(num_dumps, len(dataset.test_images))):
                write_f32(dump / f"{algo}_{i:03d}.f32", recons[algo][i])
                write_pgm16(dump / f"{algo}_{i:03d}.pgm", recons[algo][i], 0.0, 1.0)
    return report


def render_table(report: EvalReport, markdown: bool = True) -> str:
    """Table with one row per (setting, algorithm), settings in grid order."""
    lines = []
    header = ("Experimental setting", "Algorithm", "Mean SSIM", "Mean PSNR")
    if markdown:
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join("---" for _ in header) + "|")
    else:
        lines.append(f"{header[0]:<42} {header[1]:<9} {header[2]:>16} {header[3]:>16}")
    present = set(report.settings())
    for setting in ExperimentSetting:
        if setting.value not in present:
            continue
        algos = report.algorithms()
        algos = [a for a in ALGORITHMS if a in algos] + [a for a in algos if a not in ALGORITHMS]
        for algo in algos:
            rows = report.column(algo, "ssim", setting.value)
            if rows.size == 0:
                cells = ("n/a", "n/a")
            else:
                a = report.aggregate(algo, setting.value)
                cells = (f"{a.ssim_mean:.4f} ± {a.ssim_std:.4f}", f"{a.psnr_mean:.2f} ± {a.psnr_std:.2f}")
            if markdown:
                lines.append(f"| {setting.label} | {algo} | {cells[0]} | {cells[1]} |")
            else:
                lines.append(f"{setting.label:<42} {algo:<9} {cells[0]:>16} {cells[1]:>16}")
    return "\n".join(lines) + "\n"
