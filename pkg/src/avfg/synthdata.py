"""Synthetic audio-visual clips with a planted cross-modal correlation.

A clip's audio is a carrier tone modulated by a slowly varying random
envelope.  The video is a noisy grey background with one square patch whose
brightness follows the audio envelope, frame by frame, in real clips.  In
fake clips the patch follows an unrelated envelope or a circularly shifted
copy of the true one.  Optional distractor patches follow independent
envelopes in every clip, playing the part of moving but irrelevant regions.

The audio-driven patch sits at a fixed anchor with a small jitter, much
like the mouth in aligned face crops.  The "shift" split changes the carrier
band, moves the anchor and can switch the fake style, standing in for a
cross-dataset evaluation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileformat import FormatError, decode_clip, encode_clip, write_bytes

log = logging.getLogger(__name__)

REAL, FAKE = 0, 1
PROVENANCES = ("generated_real", "generated_fake", "pseudo_fake")
SPLITS = ("train", "test", "shift")

REAL_MIN_CORR = 0.9
FAKE_MAX_CORR = 0.5
LOCAL_MAX_CORR = 0.8  # a partly intact envelope keeps much of its correlation
FAKE_STYLES = ("independent", "shift", "local")


@dataclass
class ClipPair:
    clip_id: str
    audio: np.ndarray  # (Ta, Ca), float32 in [-1, 1]
    visual: np.ndarray  # (Tv, Cv, H, W), float32 in [0, 1]
    label: int
    provenance: str = "generated_real"

    def __post_init__(self):
        if self.label not in (REAL, FAKE):
            raise ValueError(f"label must be 0 (real) or 1 (fake), got {self.label}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def frames(self) -> int:
        return self.visual.shape[0]

    def validate(self) -> None:
        if self.audio.ndim != 2 or self.visual.ndim != 4:
            raise ValueError(f"{self.clip_id}: bad ranks {self.audio.shape} / {self.visual.shape}")
        if not (np.all(np.isfinite(self.audio)) and np.all(np.isfinite(self.visual))):
            raise ValueError(f"{self.clip_id}: non-finite samples")
        if self.audio.min() < -1 or self.audio.max() > 1:
            raise ValueError(f"{self.clip_id}: audio outside [-1, 1]")
        if self.visual.min() < 0 or self.visual.max() > 1:
            raise ValueError(f"{self.clip_id}: visual outside [0, 1]")


@dataclass
class SplitStyle:
    """Signal parameters that differ between the training grid and the shifted split."""

    carrier_band: tuple[float, float] = (0.02, 0.05)  # cycles per sample
    anchor: tuple[int, int] = (8, 8)  # top-left corner of the audio-driven patch
    jitter: int = 1  # uniform +-pixels around the anchor
    fake_style: str = "independent"  # or "shift", "local"

    def __post_init__(self):
        self.carrier_band = tuple(float(v) for v in self.carrier_band)
        self.anchor = tuple(int(v) for v in self.anchor)


@dataclass
class CorpusSpec:
    n_train: int = 200
    n_test: int = 60
    n_shift: int = 60
    audio_len: int = 4096
    frames: int = 8
    channels: int = 1
    height: int = 32
    width: int = 32
    patch: int = 8
    distractors: int = 0
    noise: float = 0.02
    audio_noise: float = 0.02
    envelope_floor: float = 0.1
    train_style: SplitStyle = field(default_factory=SplitStyle)
    shift_style: SplitStyle = field(
        default_factory=lambda: SplitStyle(carrier_band=(0.03, 0.06), anchor=(12, 12), fake_style="local")
    )
    seed: int = 0

    def __post_init__(self):
        for name in ("train_style", "shift_style"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, SplitStyle(**v))
        self.validate()

    def validate(self) -> None:
        if self.audio_len % self.frames:
            raise ValueError(f"audio_len {self.audio_len} must be a multiple of frames {self.frames}")
        if self.n_train % 2:
            raise ValueError("training split must be balanced; n_train has to be even")
        if self.noise < 0 or self.audio_noise < 0:
            raise ValueError("noise levels must be non-negative")
        for style in (self.train_style, self.shift_style):
            if style.fake_style not in FAKE_STYLES:
                raise ValueError(f"unknown fake style {style.fake_style!r}")
            if not 0 < style.carrier_band[0] <= style.carrier_band[1] < 0.5:
                raise ValueError(f"carrier band {style.carrier_band} outside (0, 0.5)")
            r, c = style.anchor
            j = style.jitter
            if j < 0 or r - j < 0 or c - j < 0 or r + j + self.patch > self.height or c + j + self.patch > self.width:
                raise ValueError(f"patch at {style.anchor} +-{j} does not fit inside the frame")
            if len(self.distractor_slots(style)) < self.distractors:
                raise ValueError("not enough room for the distractor patches")

    def distractor_slots(self, style: SplitStyle) -> list[tuple[int, int]]:
        """Grid-aligned corners whose patches cannot touch the jittered main patch."""
        r0, c0 = style.anchor
        j, p = style.jitter, self.patch
        slots = []
        for r in range(0, self.height - p + 1, p):
            for c in range(0, self.width - p + 1, p):
                if r + p <= r0 - j or r >= r0 + j + p or c + p <= c0 - j or c >= c0 + j + p:
                    slots.append((r, c))
        return slots

    def style_for(self, split: str) -> SplitStyle:
        return self.shift_style if split == "shift" else self.train_style

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusSpec:
        d = dict(d)
        return cls(**d)


# -- signal synthesis ----------------------------------------------------------


def _envelope(rng: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    """Random positive envelope at audio rate: knots at frame centres, linear in between."""
    knots = rng.uniform(spec.envelope_floor, 1.0, size=spec.frames + 2)
    spf = spec.audio_len // spec.frames
    knot_pos = (np.arange(spec.frames + 2) - 0.5) * spf
    t = np.arange(spec.audio_len)
    return np.interp(t, knot_pos, knots)


def _audio(rng: np.random.Generator, spec: CorpusSpec, style: SplitStyle, env: np.ndarray) -> np.ndarray:
    freq = rng.uniform(*style.carrier_band)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(spec.audio_len)
    sig = env * np.sin(2 * np.pi * freq * t + phase)
    if spec.audio_noise:
        sig = sig + spec.audio_noise * rng.standard_normal(spec.audio_len)
    lo, hi = sig.min(), sig.max()
    sig = 2 * (sig - lo) / (hi - lo) - 1
    return sig.reshape(-1, 1)


def frame_envelope(audio: np.ndarray, frames: int) -> np.ndarray:
    """Mean absolute amplitude over each frame-aligned audio window."""
    a = np.asarray(audio, dtype=np.float64).reshape(frames, -1)
    return np.abs(a).mean(axis=1)


def patch_series(visual: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Mean intensity of a square patch in every frame."""
    return visual[:, :, top : top + size, left : left + size].astype(np.float64).mean(axis=(1, 2, 3))


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def _render(
    rng: np.random.Generator,
    spec: CorpusSpec,
    series: list[tuple[tuple[int, int], np.ndarray]],
) -> np.ndarray:
    shape = (spec.frames, spec.channels, spec.height, spec.width)
    vis = np.full(shape, 0.5)
    # the audio-driven patch comes first; paint it last so it is never covered
    for (r, c), values in reversed(series):
        vis[:, :, r : r + spec.patch, c : c + spec.patch] = values[:, None, None, None]
    if spec.noise:
        vis = vis + spec.noise * rng.standard_normal(shape)
    return np.clip(vis, 0.0, 1.0)


def _layout(rng: np.random.Generator, spec: CorpusSpec, style: SplitStyle):
    j = style.jitter
    dr, dc = rng.integers(-j, j + 1, size=2) if j else (0, 0)
    main = (style.anchor[0] + int(dr), style.anchor[1] + int(dc))
    slots = spec.distractor_slots(style)
    pick = rng.choice(len(slots), size=spec.distractors, replace=False) if spec.distractors else []
    return [main] + [slots[i] for i in pick]


def _distractor_series(rng, spec, style):
    env = _envelope(rng, spec)
    return frame_envelope(_audio(rng, spec, style, env), spec.frames)


def _generate(rng, spec: CorpusSpec, split: str, fake: bool, max_tries: int = 100):
    style = spec.style_for(split)
    for _ in range(max_tries):
        audio = _audio(rng, spec, style, _envelope(rng, spec))
        env = frame_envelope(audio, spec.frames)
        layout = _layout(rng, spec, style)
        if not fake:
            driven = env
        elif style.fake_style == "independent":
            driven = _distractor_series(rng, spec, style)
        elif style.fake_style == "shift":
            q = int(np.ceil(0.25 * spec.frames))
            driven = np.roll(env, int(rng.integers(q, spec.frames - q + 1)))
        else:
            # only a run of 25-50% of the frames is out of sync
            lo, hi = int(np.ceil(0.25 * spec.frames)), int(np.ceil(0.5 * spec.frames))
            width = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.frames - width + 1))
            driven = env.copy()
            driven[start : start + width] = _distractor_series(rng, spec, style)[start : start + width]
        series = [(layout[0], driven)] + [(pos, _distractor_series(rng, spec, style)) for pos in layout[1:]]
        visual = _render(rng, spec, series)
        r = correlation(patch_series(visual, *layout[0], spec.patch), env)
        fake_max = LOCAL_MAX_CORR if style.fake_style == "local" else FAKE_MAX_CORR
        if (not fake and r >= REAL_MIN_CORR) or (fake and r <= fake_max):
            meta = {"patch": list(layout[0]), "distractors": [list(p) for p in layout[1:]], "corr": r}
            return audio.astype(np.float32), visual.astype(np.float32), meta
    raise RuntimeError(f"could not generate a {'fake' if fake else 'real'} clip passing the correlation check")


def generate_real(spec: CorpusSpec, rng: np.random.Generator, split: str = "train", clip_id: str = "real"):
    """Return ``(ClipPair, meta)`` for a real clip; ``meta`` records the patch layout."""
    audio, visual, meta = _generate(rng, spec, split, fake=False)
    return ClipPair(clip_id, audio, visual, REAL, "generated_real"), meta


def generate_fake(spec: CorpusSpec, rng: np.random.Generator, split: str = "train", clip_id: str = "fake"):
    audio, visual, meta = _generate(rng, spec, split, fake=True)
    return ClipPair(clip_id, audio, visual, FAKE, "generated_fake"), meta


# -- files ---------------------------------------------------------------------


def write_clip(path, clip: ClipPair) -> None:
    data = encode_clip(clip.audio, clip.visual, clip.label, PROVENANCES.index(clip.provenance))
    write_bytes(path, data)


def read_clip(path) -> ClipPair:
    path = Path(path)
    audio, visual, label, prov = decode_clip(path.read_bytes(), what=str(path))
    if prov >= len(PROVENANCES) or label not in (REAL, FAKE):
        raise FormatError(f"{path}: invalid label/provenance codes {label}/{prov}")
    return ClipPair(path.stem, audio, visual, label, PROVENANCES[prov])


def _split_counts(spec: CorpusSpec, split: str) -> tuple[int, int]:
    n = {"train": spec.n_train, "test": spec.n_test, "shift": spec.n_shift}[split]
    return n - n // 2, n // 2


def _clip_seed(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def generate_split(spec: CorpusSpec, split: str) -> list[tuple[ClipPair, dict]]:
    n_real, n_fake = _split_counts(spec, split)
    out = []
    for i in range(n_real + n_fake):
        fake = i >= n_real
        cid = f"{split}_{i:05d}"
        rng = _clip_seed(spec.seed, split, i)
        gen = generate_fake if fake else generate_real
        out.append(gen(spec, rng, split, cid))
    return out


def build_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write every split to ``out_dir`` and return the manifest."""
    out_dir = Path(out_dir)
    manifest = {"spec": spec.to_dict(), "clips": []}
    for split in SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for clip, meta in generate_split(spec, split):
            rel = f"{split}/{clip.clip_id}.avfg"
            try:
                write_clip(out_dir / rel, clip)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / rel}: {exc}") from exc
            digest = hashlib.sha256((out_dir / rel).read_bytes()).hexdigest()
            manifest["clips"].append(
                {"id": clip.clip_id, "split": split, "label": clip.label, "file": rel, "sha256": digest, **meta}
            )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d clips to %s", len(manifest["clips"]), out_dir)
    return manifest


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no manifest at {path}") from exc


def load_split(corpus_dir, split: str) -> list[ClipPair]:
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir)
    clips = []
    for entry in manifest["clips"]:
        if entry["split"] == split:
            clip = read_clip(corpus_dir / entry["file"])
            if clip.label != entry["label"]:
                raise FormatError(f"{entry['file']}: label disagrees with manifest")
            clips.append(clip)
    if not clips:
        raise ValueError(f"split {split!r} is empty in {corpus_dir}")
    return clips


@dataclass
class SeededCorpus:
    """Callable ``seed -> {split: clips}`` that regenerates the corpus for each seed."""

    spec: CorpusSpec

    def __call__(self, seed: int) -> dict[str, list[ClipPair]]:
        spec = dataclasses.replace(self.spec, seed=seed)
        return {split: [clip for clip, _ in generate_split(spec, split)] for split in SPLITS}
