"""Spatially-local audio-visual detector.

Data flow for one batch::

    audio (N, Ta, Ca) --A--> Fa (N, T', C')
    video (N, Tv, Cv, H, W) --V--> Fv (N, T', C', H', W')
    M[i,j]   = || flat(Fa) - flat(Fv[:, :, i, j]) ||_2
    A        = softmax over (i, j) of <Ea(Fa), Ev(Fv)[..., i, j]> / (T' C')
    M_hat    = M, M*A or M*A + M
    y        = sigmoid(w . flat(M_hat) + b)
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormState,
    ConvSpec,
    adaptive_avg_pool_spatial,
    adaptive_pool_matrix,
    batchnorm,
    conv_forward,
    conv_output_extent,
    interpolation_matrix,
    kaiming_uniform,
    linear,
    maxpool,
    relu,
    sigmoid,
    softmax_grid,
)
from .tensor import ShapeError, Tensor

FUSION_VARIANTS = ("plain", "residual")


@dataclass
class ModelConfig:
    """Geometry and ablation switches of the detector."""

    preset: str = "desk"
    audio_len: int = 4096
    audio_channels: int = 1
    frames: int = 8
    visual_channels: int = 1
    height: int = 32
    width: int = 32
    feat_time: int = 16
    feat_channels: int = 8
    # audio branch: one conv1d block per entry; pool 0 means no max pool
    audio_widths: tuple[int, ...] = (4, 8, 8, 8)
    audio_kernels: tuple[int, ...] = (7, 5, 5, 3)
    audio_pools: tuple[int, ...] = (4, 4, 4, 4)
    # visual branch: optional strided stem, then residual blocks with spatial pooling
    visual_stem: int = 4
    visual_stem_stride: int = 2
    visual_widths: tuple[int, ...] = (4, 8, 8)
    visual_pools: tuple[int, ...] = (2, 2, 1)
    attn_channels: int | None = None
    attention: bool = True
    fusion: str = "plain"
    pooled_size: tuple[int, int] | None = None
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("audio_widths", "audio_kernels", "audio_pools", "visual_widths", "visual_pools"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.pooled_size is not None:
            self.pooled_size = tuple(int(v) for v in self.pooled_size)
        self.validate()

    @classmethod
    def paper(cls, **overrides) -> ModelConfig:
        base = dict(
            preset="paper",
            audio_len=48000,
            audio_channels=1,
            frames=30,
            visual_channels=3,
            height=224,
            width=224,
            feat_time=128,
            feat_channels=15,
            audio_widths=(4, 8, 12, 15, 15),
            audio_kernels=(7, 5, 5, 3, 3),
            audio_pools=(3, 3, 5, 5, 0),
            visual_stem=0,
            visual_stem_stride=1,
            visual_widths=(8, 12, 15),
            visual_pools=(2, 2, 2),
            attn_channels=3,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> ModelConfig:
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def embed_channels(self) -> int:
        if self.attn_channels is not None:
            return self.attn_channels
        return self.feat_channels // 4

    def validate(self) -> None:
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"fusion must be one of {FUSION_VARIANTS}, got {self.fusion!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.attn_channels is None and self.feat_channels % 4:
            raise ValueError(f"feature channels {self.feat_channels} not divisible by 4 for the attention embeddings")
        if self.embed_channels < 1:
            raise ValueError("attention embedding needs at least one channel")
        if not (len(self.audio_widths) == len(self.audio_kernels) == len(self.audio_pools)):
            raise ValueError("audio_widths, audio_kernels and audio_pools must have equal length")
        if len(self.visual_widths) != len(self.visual_pools):
            raise ValueError("visual_widths and visual_pools must have equal length")
        if self.audio_widths[-1] != self.feat_channels or self.visual_widths[-1] != self.feat_channels:
            raise ValueError("both branches must end with feat_channels channels")
        if self.pooled_size is not None:
            h, w = self.map_grid
            ph, pw = self.pooled_size
            if not (1 <= ph <= h and 1 <= pw <= w):
                raise ValueError(f"pooled size {self.pooled_size} exceeds map extents {(h, w)}")
        self.audio_feature_shape()
        self.visual_feature_shape()

    # -- shape propagation ----------------------------------------------

    def _audio_time_before_adapt(self) -> int:
        t = self.audio_len
        for k, p in zip(self.audio_kernels, self.audio_pools):
            t = conv_output_extent(t, k, 1, k // 2)
            if p:
                if p > t:
                    raise ValueError(f"audio length {self.audio_len} too short for the pooling chain")
                t = (t - p) // p + 1
        return t

    def audio_feature_shape(self) -> tuple[int, int]:
        t = self._audio_time_before_adapt()
        if t < self.feat_time:
            raise ValueError(f"audio chain yields {t} steps, fewer than feat_time={self.feat_time}")
        return (self.feat_time, self.feat_channels)

    @property
    def map_grid(self) -> tuple[int, int]:
        h, w = self.height, self.width
        if self.visual_stem:
            h = conv_output_extent(h, 3, self.visual_stem_stride, 1)
            w = conv_output_extent(w, 3, self.visual_stem_stride, 1)
        for p in self.visual_pools:
            if p > 1:
                h, w = (h - p) // p + 1, (w - p) // p + 1
        if h < 1 or w < 1:
            raise ValueError("visual chain collapses the frame")
        return (h, w)

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.pooled_size if self.pooled_size is not None else self.map_grid

    def visual_feature_shape(self) -> tuple[int, int, int, int]:
        return (self.feat_time, self.feat_channels, *self.map_grid)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if d.get("pooled_size") is not None:
            d["pooled_size"] = tuple(d["pooled_size"])
        return cls(**d)


@dataclass
class FeatureTensors:
    audio: Tensor  # (N, T', C')
    visual: Tensor  # (N, T', C', H', W')

    def check(self) -> None:
        n, t, c = self.audio.shape
        if self.visual.shape[:3] != (n, t, c):
            raise ShapeError(f"audio features {self.audio.shape} disagree with visual features {self.visual.shape}")


@dataclass
class InconsistencyMaps:
    distance: Tensor  # M, (N, H', W')
    attention: Tensor | None  # A, (N, H', W'), None when attention is off
    fused: Tensor  # M_hat


@dataclass
class Prediction:
    logit: Tensor  # (N,)
    prob: Tensor  # (N,)


# -- standalone map operations ---------------------------------------------


def distance_map(feats: FeatureTensors) -> Tensor:
    """Per-position L2 distance between audio and visual feature vectors."""
    feats.check()
    fa, fv = feats.audio, feats.visual
    n, t, c, h, w = fv.shape
    fa_b = T.broadcast_to(T.reshape(fa, (n, t, c, 1, 1)), fv.shape)
    return T.l2_norm(fv - fa_b, axis=(1, 2))


def attention_logits(feats: FeatureTensors, e_a: ConvSpec, e_v: ConvSpec) -> Tensor:
    feats.check()
    fa, fv = feats.audio, feats.visual
    n, t, c, h, w = fv.shape
    if e_a.out_channels != e_v.out_channels:
        raise ShapeError(f"embedding widths differ: {e_a.out_channels} vs {e_v.out_channels}")
    if e_a.in_channels != c or e_v.in_channels != c:
        raise ShapeError(f"embeddings expect {e_a.in_channels}/{e_v.in_channels} channels, features have {c}")
    ea = conv_forward(T.transpose(fa, (0, 2, 1)), e_a)  # (N, k, T')
    ev = conv_forward(T.transpose(fv, (0, 2, 1, 3, 4)), e_v)  # (N, k, T', H', W')
    k = ea.shape[1]
    ea_b = T.broadcast_to(T.reshape(ea, (n, k, t, 1, 1)), ev.shape)
    return T.reduce_sum(ea_b * ev, axis=(1, 2)) * (1.0 / (t * c))


def attention_map(feats: FeatureTensors, e_a: ConvSpec, e_v: ConvSpec) -> Tensor:
    """Cross-attention weights over the spatial grid; each map sums to one."""
    return softmax_grid(attention_logits(feats, e_a, e_v))


def fuse(m: Tensor, a: Tensor | None, variant: str = "plain", attention_enabled: bool = True) -> Tensor:
    if not attention_enabled:
        return m
    if a is None:
        raise ValueError("attention map required when attention is enabled")
    if variant == "plain":
        return m * a
    if variant == "residual":
        return m * a + m
    raise ValueError(f"unknown fusion variant {variant!r}")


def classify(m_hat: Tensor, weight: Tensor, bias: Tensor) -> Prediction:
    n = m_hat.shape[0]
    flat = T.reshape(m_hat, (n, -1))
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"classifier trained for {weight.shape[1]} map cells, got {flat.shape[1]}")
    logit = T.reshape(linear(flat, weight, bias), (n,))
    return Prediction(logit=logit, prob=sigmoid(logit))


# -- the model ---------------------------------------------------------------


@dataclass
class _ConvBN:
    conv: ConvSpec
    bn: BatchNormState

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(conv_forward(x, self.conv), self.bn)


@dataclass
class Detector:
    """Parameters plus forward pass; construct with :meth:`create`."""

    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    bn_states: "OrderedDict[str, BatchNormState]" = field(default_factory=OrderedDict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> Detector:
        det = cls(config)
        det._build(np.random.default_rng(seed))
        return det

    # -- construction --------------------------------------------------

    def _param(self, name, arr) -> Tensor:
        t = Tensor(arr.astype(self.config.np_dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, rng, name, cin, cout, kernel, stride=1, padding=0, bias=True) -> ConvSpec:
        kernel = tuple(kernel)
        fan_in = cin * int(np.prod(kernel))
        w = self._param(f"{name}.weight", kaiming_uniform(rng, (cout, cin, *kernel), fan_in))
        b = self._param(f"{name}.bias", np.zeros(cout)) if bias else None
        return ConvSpec(w, b, stride, padding)

    def _bn(self, name, channels) -> BatchNormState:
        st = BatchNormState.create(channels, self.config.np_dtype)
        st.scale.name, st.shift.name = f"{name}.scale", f"{name}.shift"
        self.params[st.scale.name] = st.scale
        self.params[st.shift.name] = st.shift
        self.bn_states[name] = st
        return st

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self.audio_blocks = []
        cin = cfg.audio_channels
        for i, (cout, k) in enumerate(zip(cfg.audio_widths, cfg.audio_kernels)):
            conv = self._conv(rng, f"audio.{i}.conv", cin, cout, (k,), 1, k // 2, bias=False)
            self.audio_blocks.append(_ConvBN(conv, self._bn(f"audio.{i}.bn", cout)))
            cin = cout

        cin = cfg.visual_channels
        self.visual_stem = None
        if cfg.visual_stem:
            s = cfg.visual_stem_stride
            conv = self._conv(rng, "visual.stem.conv", cin, cfg.visual_stem, (3, 3, 3), (1, s, s), 1, bias=False)
            self.visual_stem = _ConvBN(conv, self._bn("visual.stem.bn", cfg.visual_stem))
            cin = cfg.visual_stem
        self.visual_blocks = []
        for i, cout in enumerate(cfg.visual_widths):
            a = self._conv(rng, f"visual.{i}.conv_a", cin, cout, (3, 3, 3), 1, 1, bias=False)
            b = self._conv(rng, f"visual.{i}.conv_b", cout, cout, (3, 3, 3), 1, 1, bias=False)
            self.visual_blocks.append(
                (_ConvBN(a, self._bn(f"visual.{i}.bn_a", cout)), _ConvBN(b, self._bn(f"visual.{i}.bn_b", cout)))
            )
            cin = cout

        c, k = cfg.feat_channels, cfg.embed_channels
        self.embed_audio = self._conv(rng, "attn.audio", c, k, (1,))
        self.embed_visual = self._conv(rng, "attn.visual", c, k, (1, 1, 1))
        h, w = cfg.map_shape
        # zero classifier: every input starts at y = 0.5
        self.cls_weight = self._param("classifier.weight", np.zeros((1, h * w)))
        self.cls_bias = self._param("classifier.bias", np.zeros(1))

        t_audio = cfg._audio_time_before_adapt()
        self._audio_adapt = None if t_audio == cfg.feat_time else adaptive_pool_matrix(t_audio, cfg.feat_time)
        self._visual_interp = None if cfg.frames == cfg.feat_time else interpolation_matrix(cfg.frames, cfg.feat_time)

    # -- state -----------------------------------------------------------

    def train(self, mode: bool = True) -> Detector:
        for st in self.bn_states.values():
            st.training = mode
        return self

    def eval(self) -> Detector:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.params.items())
        for name, st in self.bn_states.items():
            state[f"{name}.running_mean"] = st.running_mean.copy()
            state[f"{name}.running_var"] = st.running_var.copy()
        return state

    def load_state_dict(self, state) -> None:
        expected = set(self.params) | {
            f"{n}.{s}" for n in self.bn_states for s in ("running_mean", "running_var")
        }
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr
        for name, st in self.bn_states.items():
            st.running_mean[...] = state[f"{name}.running_mean"]
            st.running_var[...] = state[f"{name}.running_var"]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ---------------------------------------------------------

    def _as_input(self, x, rank: int, name: str) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.config.np_dtype)
        if t.dtype != self.config.np_dtype:
            t = Tensor(t.data, dtype=self.config.np_dtype)
        if t.ndim == rank - 1:
            t = T.reshape(t, (1, *t.shape))
        if t.ndim != rank:
            raise ShapeError(f"{name} input must have rank {rank} (batched) or {rank - 1}, got {t.shape}")
        return t

    def extract_audio(self, audio) -> Tensor:
        cfg = self.config
        x = self._as_input(audio, 3, "audio")
        if x.shape[1:] != (cfg.audio_len, cfg.audio_channels):
            raise ShapeError(f"audio shape {x.shape[1:]} != configured {(cfg.audio_len, cfg.audio_channels)}")
        h = T.transpose(x, (0, 2, 1))
        for block, pool in zip(self.audio_blocks, cfg.audio_pools):
            h = relu(block(h))
            if pool:
                h = maxpool(h, pool, pool)
        if self._audio_adapt is not None:
            h = T.axis_matmul(h, self._audio_adapt, 2)
        return T.transpose(h, (0, 2, 1))

    def extract_visual(self, video) -> Tensor:
        cfg = self.config
        x = self._as_input(video, 5, "visual")
        expect = (cfg.frames, cfg.visual_channels, cfg.height, cfg.width)
        if x.shape[1:] != expect:
            raise ShapeError(f"visual shape {x.shape[1:]} != configured {expect}")
        h = T.transpose(x, (0, 2, 1, 3, 4))  # (N, C, T, H, W)
        if self.visual_stem is not None:
            h = relu(self.visual_stem(h))
        for (a, b), pool in zip(self.visual_blocks, cfg.visual_pools):
            h = relu(a(h))
            h = relu(b(h) + h)
            if pool > 1:
                h = maxpool(h, (1, pool, pool), (1, pool, pool))
        if self._visual_interp is not None:
            h = T.axis_matmul(h, self._visual_interp, 2)
        return T.transpose(h, (0, 2, 1, 3, 4))

    def features(self, audio, video) -> FeatureTensors:
        feats = FeatureTensors(self.extract_audio(audio), self.extract_visual(video))
        if self.config.pooled_size is not None:
            feats.visual = adaptive_avg_pool_spatial(feats.visual, *self.config.pooled_size)
        feats.check()
        return feats

    def maps(self, feats: FeatureTensors) -> InconsistencyMaps:
        cfg = self.config
        m = distance_map(feats)
        a = attention_map(feats, self.embed_audio, self.embed_visual) if cfg.attention else None
        return InconsistencyMaps(m, a, fuse(m, a, cfg.fusion, cfg.attention))

    def classify(self, m_hat: Tensor) -> Prediction:
        return classify(m_hat, self.cls_weight, self.cls_bias)

    def forward(self, audio, video) -> tuple[Prediction, InconsistencyMaps]:
        maps = self.maps(self.features(audio, video))
        return self.classify(maps.fused), maps

    __call__ = forward


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
