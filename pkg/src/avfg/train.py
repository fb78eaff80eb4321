"""Training, scoring and ablation runs for the detector."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .detector import Detector, ModelConfig
from .fileformat import decode_checkpoint, encode_checkpoint, write_bytes
from .layers import softplus
from .pseudofake import AugmentConfig, augment_pair
from .synthdata import ClipPair
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss during training."""


# -- loss and optimiser --------------------------------------------------------


def bce_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logit)`` against 0/1 labels, in logit space."""
    labels = np.asarray(label, dtype=logit.dtype)
    if labels.shape != logit.shape:
        labels = np.broadcast_to(labels, logit.shape)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"labels must be binary, got {np.unique(labels)}")
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    per = softplus(logit) - logit * Tensor(labels)
    return T.reduce_mean(per)


@dataclass
class Adam:
    """Adam with classic coupled L2 weight decay (``g + wd * theta``)."""

    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1**t
        bc2 = 1 - self.beta2**t
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise T.ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-5
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "augment": self.augment.to_dict() if self.augment else None,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class TrainResult:
    detector: Detector
    log: list[dict]
    best_epoch: int
    best_loss: float
    checkpoint: Path | None = None


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, detector: Detector, extra: dict | None = None) -> None:
    cfg = {"model": detector.config.to_dict(), **(extra or {})}
    write_bytes(path, encode_checkpoint(cfg, detector.state_dict()))


def load_checkpoint(path) -> tuple[Detector, dict]:
    cfg, tensors = decode_checkpoint(Path(path).read_bytes(), what=str(path))
    det = Detector.create(ModelConfig.from_dict(cfg["model"]))
    det.load_state_dict(tensors)
    det.eval()
    return det, cfg


# -- training ------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batchnorm needs two samples; fold a trailing singleton into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _stack(clips: list[ClipPair], dtype) -> tuple[np.ndarray, np.ndarray]:
    audio = np.stack([c.audio for c in clips]).astype(dtype, copy=False)
    visual = np.stack([c.visual for c in clips]).astype(dtype, copy=False)
    return audio, visual


def train(
    config: TrainConfig,
    clips: list[ClipPair],
    out_dir=None,
    log_path=None,
    on_epoch=None,
) -> TrainResult:
    """Minibatch BCE training; keeps the weights of the lowest mean-loss epoch.

    ``on_epoch(record, detector)`` is called after every epoch, e.g. for progress reports.
    """
    if len(clips) < 2:
        raise ValueError("need at least two training clips")
    detector = Detector.create(config.model, seed=config.seed)
    detector.train()
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    dtype = config.model.np_dtype
    ckpt = Path(out_dir) / "checkpoint.avfc" if out_dir is not None else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None

    records, best_loss, best_epoch, best_state = [], math.inf, -1, None
    try:
        for epoch in range(config.epochs):
            losses = []
            for b, idx in enumerate(_batches(len(clips), config.batch_size, rng)):
                batch, labels = [], []
                for i in idx:
                    clip, label = clips[i], clips[i].label
                    if config.augment is not None:
                        j = int(rng.integers(len(clips) - 1))
                        donor = clips[j + (j >= i)]
                        clip, label, _ = augment_pair(clip, donor, config.augment, rng)
                    batch.append(clip)
                    labels.append(label)
                audio, visual = _stack(batch, dtype)
                detector.zero_grad()
                pred, _ = detector(audio, visual)
                loss = bce_loss(pred.logit, labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} batch {b} (clips {[c.clip_id for c in batch]})"
                    )
                loss.backward()
                opt.step(detector.params)
                losses.append(value)
            mean_loss = float(np.mean(losses))
            improved = mean_loss < best_loss
            if improved:
                best_loss, best_epoch, best_state = mean_loss, epoch, detector.state_dict()
                if ckpt is not None:
                    save_checkpoint(ckpt, detector, {"epoch": epoch, "loss": mean_loss, "train": config.to_dict()})
            rec = {
                "epoch": epoch,
                "loss": mean_loss,
                "lr": config.lr,
                "seed": config.seed,
                # relative to the output directory, so logs do not depend on where a run was written
                "checkpoint": ckpt.name if (improved and ckpt is not None) else None,
            }
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            log.info("epoch %d loss %.5f%s", epoch, mean_loss, " *" if improved else "")
            if on_epoch is not None:
                on_epoch(rec, detector)
    finally:
        if log_file is not None:
            log_file.close()

    detector.load_state_dict(best_state)
    detector.eval()
    return TrainResult(detector, records, best_epoch, best_loss, ckpt)


# -- scoring -------------------------------------------------------------------


def subsequence_starts(frames: int, window: int) -> list[int]:
    """Window starts with stride ``window // 2``; the last window is right-aligned."""
    if frames < window:
        raise ValueError(f"clip has {frames} frames, shorter than one {window}-frame subsequence")
    stride = max(1, window // 2)
    starts = list(range(0, frames - window + 1, stride))
    if starts[-1] != frames - window:
        starts.append(frames - window)
    return starts


def _subsequences(clip: ClipPair, window: int):
    spf = clip.audio.shape[0] // clip.visual.shape[0]
    for s in subsequence_starts(clip.frames, window):
        yield clip.audio[s * spf : (s + window) * spf], clip.visual[s : s + window]


def video_scores(detector: Detector, clips: list[ClipPair], batch_size: int = 16):
    """Per-clip mean of subsequence probabilities, plus per-clip subsequence scores and mean(M_hat)."""
    cfg = detector.config
    items = []
    for ci, clip in enumerate(clips):
        for a, v in _subsequences(clip, cfg.frames):
            items.append((ci, a, v))
    probs = np.empty(len(items))
    map_means = np.empty(len(items))
    with T.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s : s + batch_size]
            audio = np.stack([it[1] for it in chunk]).astype(cfg.np_dtype)
            visual = np.stack([it[2] for it in chunk]).astype(cfg.np_dtype)
            pred, maps = detector(audio, visual)
            probs[s : s + len(chunk)] = pred.prob.data
            map_means[s : s + len(chunk)] = maps.fused.data.reshape(len(chunk), -1).mean(axis=1)
    owner = np.array([it[0] for it in items])
    per_clip = [probs[owner == i] for i in range(len(clips))]
    scores = np.array([p.mean() for p in per_clip])
    mean_maps = np.array([map_means[owner == i].mean() for i in range(len(clips))])
    return scores, per_clip, mean_maps


def video_score(detector: Detector, clip: ClipPair) -> float:
    return float(video_scores(detector, [clip])[0][0])


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(fake score > real score) with ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != labels.size:
        raise ValueError("AUC undefined: need binary labels with both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    # average ranks over tie groups
    bounds = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [scores.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    clip_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    subsequence_scores: list[np.ndarray]
    mean_fused: np.ndarray
    auc: float
    meta: dict = field(default_factory=dict)

    def histograms(self, bins: int = 20) -> dict:
        lo, hi = float(self.mean_fused.min()), float(self.mean_fused.max())
        if hi <= lo:
            hi = lo + 1e-12
        edges = np.linspace(lo, hi, bins + 1)
        return {
            "edges": edges,
            "real": np.histogram(self.mean_fused[self.labels == 0], edges)[0],
            "fake": np.histogram(self.mean_fused[self.labels == 1], edges)[0],
        }


def evaluate(detector: Detector, clips: list[ClipPair], meta: dict | None = None) -> EvalReport:
    scores, per_clip, mean_fused = video_scores(detector, clips)
    labels = np.array([c.label for c in clips])
    return EvalReport(
        [c.clip_id for c in clips], labels, scores, per_clip, mean_fused, roc_auc(scores, labels), meta or {}
    )


# -- exports -------------------------------------------------------------------


def _write_grid_csv(path: Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(grid, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def _write_pgm(path: Path, grid: np.ndarray) -> tuple[float, float]:
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        pix = np.round(255 * (grid - lo) / (hi - lo)).astype(np.uint8)
    else:
        pix = np.zeros(grid.shape, dtype=np.uint8)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_maps(detector: Detector, clips: list[ClipPair], out_dir) -> list[dict]:
    """Write M, A and M_hat for each clip as CSV grids and min-max scaled PGM images."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = detector.config
    written = []
    with T.no_grad():
        for clip in clips:
            a, v = next(_subsequences(clip, cfg.frames))
            pred, maps = detector(a[None].astype(cfg.np_dtype), v[None].astype(cfg.np_dtype))
            grids = {"M": maps.distance.data[0], "M_hat": maps.fused.data[0]}
            if maps.attention is not None:
                grids["A"] = maps.attention.data[0]
            bounds = {}
            for key, grid in grids.items():
                stem = f"{clip.clip_id}_{key}"
                _write_grid_csv(out_dir / f"{stem}.csv", grid)
                bounds[key] = _write_pgm(out_dir / f"{stem}.pgm", grid)
            entry = {"clip": clip.clip_id, "label": clip.label, "prob": float(pred.prob.data[0]), "bounds": bounds}
            (out_dir / f"{clip.clip_id}_bounds.json").write_text(json.dumps(entry, indent=1))
            written.append(entry)
    return written


def export_histograms(report: EvalReport, path, bins: int = 20) -> dict:
    hist = report.histograms(bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "real", "fake"])
        e = hist["edges"]
        for i in range(bins):
            w.writerow([repr(float(e[i])), repr(float(e[i + 1])), int(hist["real"][i]), int(hist["fake"][i])])
    return hist


# -- ablations -----------------------------------------------------------------

TABLE1_ROWS = {
    "a": dict(attention=False, pseudo_fakes=False, residual=False),
    "b": dict(attention=False, pseudo_fakes=True, residual=False),
    "c": dict(attention=True, pseudo_fakes=False, residual=False),
    "d": dict(attention=True, pseudo_fakes=True, residual=False),
    "e": dict(attention=True, pseudo_fakes=True, residual=True),
}


@dataclass
class AblationCell:
    row: str
    attention: bool
    pseudo_fakes: bool
    residual: bool
    r_min: float = 1e-6
    r_max: float = 1.0
    map_size: int = 0  # 0 = full resolution

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        model = dataclasses.replace(
            base.model,
            attention=self.attention,
            fusion="residual" if self.residual else "plain",
            pooled_size=(self.map_size, self.map_size) if self.map_size else None,
        )
        aug = None
        if self.pseudo_fakes:
            base_aug = base.augment or AugmentConfig()
            aug = dataclasses.replace(base_aug, r_min=self.r_min, r_max=self.r_max)
        return dataclasses.replace(base, model=model, augment=aug, seed=seed)


def ablation_grid(
    name: str, map_sizes=(1, 2, 4), r_min_values=(1e-6, 0.25, 0.5, 0.75), r_max_values=(1.0, 0.75, 0.5, 0.25)
) -> list[AblationCell]:
    """Cells of a named grid; every sweep varies one axis around row (d)."""
    if name == "table1":
        return [AblationCell(row, **flags) for row, flags in TABLE1_ROWS.items()]
    d = TABLE1_ROWS["d"]
    if name == "rmin":
        return [AblationCell(f"rmin={r:g}", **d, r_min=r) for r in r_min_values]
    if name == "rmax":
        return [AblationCell(f"rmax={r:g}", **d, r_max=r) for r in r_max_values]
    if name == "mapsize":
        return [AblationCell(f"map={m}", **d, map_size=m) for m in map_sizes]
    if name == "full":
        return ablation_grid("table1") + ablation_grid("rmin") + ablation_grid("rmax") + ablation_grid("mapsize")
    raise ValueError(f"unknown grid {name!r}; choose table1, rmin, rmax, mapsize or full")


GRIDS = ("table1", "rmin", "rmax", "mapsize", "full")


RESULT_FIELDS = [
    "row",
    "attention",
    "pseudo_fakes",
    "residual",
    "r_min",
    "r_max",
    "map_size",
    "seed",
    "auc_test",
    "auc_shift",
    "best_epoch",
    "best_loss",
    "config_hash",
]


def run_cell(cell: AblationCell, base: TrainConfig, seed: int, splits: dict[str, list[ClipPair]]) -> dict:
    cfg = cell.train_config(base, seed)
    result = train(cfg, splits["train"])
    row = {
        **dataclasses.asdict(cell),
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
        "config_hash": cfg.hash(),
    }
    for split in ("test", "shift"):
        if split in splits:
            row[f"auc_{split}"] = evaluate(result.detector, splits[split]).auc
    return row


def _run_seed(cells, base, seed, splits_for):
    splits = splits_for(seed)
    return [run_cell(cell, base, seed, splits) for cell in cells]


def run_ablation_suite(
    cells: list[AblationCell],
    base: TrainConfig,
    seeds: list[int],
    splits_for,
    out_csv=None,
    workers: int = 1,
) -> list[dict]:
    """Train and evaluate every cell for every seed.

    ``splits_for(seed)`` returns the ``{"train", "test", "shift"}`` clip lists
    for one seed, so each seed gets its own corpus.  With ``workers > 1``
    seeds run in separate processes; the rows do not depend on the worker count.
    """
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        n = len(seeds)
        with ProcessPoolExecutor(min(workers, n)) as pool:
            per_seed = list(pool.map(_run_seed, [cells] * n, [base] * n, seeds, [splits_for] * n))
    else:
        per_seed = [_run_seed(cells, base, seed, splits_for) for seed in seeds]
    rows = [row for chunk in per_seed for row in chunk]
    if out_csv is not None:
        write_results(out_csv, rows)
    return rows


def write_results(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
