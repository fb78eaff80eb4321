"""Temporally-local pseudo-fakes: splice a short donor segment into a clip.

Segments are described with 1-based indices.  A segment of length ``l``
starting at ``g`` covers elements ``g .. g+l-1``; ``g`` is drawn from
``[1, n-l]`` (or is 1 when ``l == n``).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .synthdata import FAKE, ClipPair

log = logging.getLogger(__name__)

MODES = ("audio_only", "visual_only", "both")


@dataclass
class AugmentConfig:
    r_min: float = 1e-6
    r_max: float = 1.0
    apply_probability: float = 0.5
    mode_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        self.mode_weights = tuple(float(w) for w in self.mode_weights)
        if not 0 < self.r_min <= self.r_max <= 1:
            raise ValueError(f"need 0 < r_min <= r_max <= 1, got r_min={self.r_min}, r_max={self.r_max}")
        if not 0 <= self.apply_probability <= 1:
            raise ValueError(f"apply_probability {self.apply_probability} outside [0, 1]")
        if len(self.mode_weights) != 3 or min(self.mode_weights) < 0 or sum(self.mode_weights) <= 0:
            raise ValueError(f"mode_weights must be three non-negative numbers, got {self.mode_weights}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PseudoFakeSpec:
    mode: str
    n: int
    l: int  # noqa: E741
    g: int
    donor_id: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        upper = max(1, self.n - self.l)
        if not (1 <= self.l <= self.n and 1 <= self.g <= upper):
            raise ValueError(f"segment l={self.l}, g={self.g} invalid for n={self.n}")

    @property
    def window(self) -> slice:
        """0-based slice of replaced elements."""
        return slice(self.g - 1, self.g - 1 + self.l)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def length_bounds(n: int, config: AugmentConfig) -> tuple[int, int]:
    """Segment length range ``[l_min, l_max]`` for a sequence of ``n`` elements."""
    l_min = max(2, _round_half_up(config.r_min * n))
    l_max = _round_half_up(config.r_max * n)
    l_min = min(l_min, n)
    l_max = min(max(l_max, 2), n)
    return l_min, max(l_min, l_max)


def sample_spec(n: int, config: AugmentConfig, rng: np.random.Generator, donor_id: str = "") -> PseudoFakeSpec | None:
    """Draw (mode, l, g); returns None when the sequence is too short to splice."""
    l_min, l_max = length_bounds(n, config)
    if n < 2 or n < l_min:
        log.info("sequence of length %d shorter than l_min=%d; not augmented", n, l_min)
        return None
    w = np.asarray(config.mode_weights, dtype=float)
    mode = MODES[int(rng.choice(3, p=w / w.sum()))]
    l = int(rng.integers(l_min, l_max + 1))  # noqa: E741
    g = int(rng.integers(1, max(1, n - l) + 1))
    return PseudoFakeSpec(mode, n, l, g, donor_id)


def splice(target: np.ndarray, donor: np.ndarray, spec: PseudoFakeSpec, scale: int = 1) -> np.ndarray:
    """Copy of ``target`` with the spec's window taken from ``donor``.

    ``scale`` maps one spec element onto ``scale`` consecutive rows, which is
    how a frame window is carried over to audio samples.
    """
    target = np.asarray(target)
    donor = np.asarray(donor)
    if target.shape != donor.shape:
        raise ValueError(f"target {target.shape} and donor {donor.shape} differ")
    if target.shape[0] != spec.n * scale:
        raise ValueError(f"sequence length {target.shape[0]} != n*scale = {spec.n * scale}")
    out = target.copy()
    w = spec.window
    out[w.start * scale : w.stop * scale] = donor[w.start * scale : w.stop * scale]
    return out


def samples_per_frame(clip: ClipPair) -> int:
    ta, tv = clip.audio.shape[0], clip.visual.shape[0]
    if ta % tv:
        raise ValueError(f"{clip.clip_id}: {ta} audio samples not divisible by {tv} frames")
    return ta // tv


def audio_window(spec: PseudoFakeSpec, spf: int) -> tuple[int, int]:
    """1-based inclusive audio sample range replaced for a frame window."""
    return (spec.g - 1) * spf + 1, (spec.g + spec.l - 1) * spf


def augment_pair(
    clip: ClipPair, donor: ClipPair, config: AugmentConfig, rng: np.random.Generator
) -> tuple[ClipPair, int, PseudoFakeSpec | None]:
    """Possibly turn ``clip`` into a pseudo-fake using ``donor``.

    Returns ``(clip, label, spec)``; ``spec`` is None when nothing was replaced.
    """
    if clip.audio.shape != donor.audio.shape or clip.visual.shape != donor.visual.shape:
        raise ValueError(f"geometry mismatch between {clip.clip_id} and donor {donor.clip_id}")
    spf = samples_per_frame(clip)
    if rng.random() >= config.apply_probability:
        return clip, clip.label, None
    spec = sample_spec(clip.frames, config, rng, donor.clip_id)
    if spec is None:
        return clip, clip.label, None
    audio, visual = clip.audio, clip.visual
    if spec.mode in ("audio_only", "both"):
        audio = splice(audio, donor.audio, spec, spf)
    if spec.mode in ("visual_only", "both"):
        visual = splice(visual, donor.visual, spec)
    out = ClipPair(f"{clip.clip_id}+pf", audio, visual, FAKE, "pseudo_fake")
    return out, FAKE, spec
