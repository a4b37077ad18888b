"""Backbones, projection head, and the student/teacher pair."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKBONES = ("mlp", "small-conv")
HEAD_LAYERS = 3
CONV_BLOCKS = 4


class ModelNaNError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "small-conv"
    input_shape: tuple[int, int, int] = (32, 32, 3)  # H, W, C
    backbone_dim: int = 128
    head_hidden: int = 512
    head_out: int = 256
    activation: str = "gelu"
    init_seed: int = 0
    mlp_hidden: int = 256
    head_init_std: float | None = 0.02  # None: 1/sqrt(fan_in)
    head_last_scale: float = 0.1
    dtype: str = "float32"
    pixel_mean: tuple[float, ...] | None = None
    pixel_std: tuple[float, ...] | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.backbone_dim < 1:
            raise ValueError("backbone_dim must be >= 1")
        if self.head_out < 8 or self.head_out % 8:
            raise ValueError(f"head_out (number of bits) must be >= 8 and divisible by 8, got {self.head_out}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def bits(self) -> int:
        return self.head_out

    def conv_channels(self) -> list[int]:
        d = self.backbone_dim
        return [max(4, d // 8), max(4, d // 4), max(4, d // 2), d]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    dt = np.dtype(cfg.dtype)
    h, w, c = cfg.input_shape
    params = {}
    if cfg.backbone == "mlp":
        dims = [h * w * c, cfg.mlp_hidden, cfg.mlp_hidden, cfg.backbone_dim]
        for i in range(3):
            params[f"backbone.fc{i}.w"] = rng.standard_normal((dims[i], dims[i + 1])) * math.sqrt(2.0 / dims[i])
            params[f"backbone.fc{i}.b"] = np.zeros(dims[i + 1])
    else:
        chans = [c] + cfg.conv_channels()
        for i in range(CONV_BLOCKS):
            fan_in = chans[i] * 9
            params[f"backbone.conv{i}.w"] = rng.standard_normal((chans[i + 1], chans[i], 3, 3)) * math.sqrt(2.0 / fan_in)
            params[f"backbone.conv{i}.b"] = np.zeros(chans[i + 1])
    return {k: v.astype(dt) for k, v in params.items()}


def init_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One draw from the head distribution: truncated normal (std 0.02), zero
    biases, last layer scaled by 0.1."""
    dt = np.dtype(cfg.dtype)
    dims = [cfg.backbone_dim, cfg.head_hidden, cfg.head_hidden, cfg.head_out]
    params = {}
    for i in range(HEAD_LAYERS):
        std = cfg.head_init_std if cfg.head_init_std is not None else 1 / math.sqrt(dims[i])
        w = _trunc_normal(rng, (dims[i], dims[i + 1]), std)
        if i == HEAD_LAYERS - 1:
            w *= cfg.head_last_scale
        params[f"head.fc{i}.w"] = w
        params[f"head.fc{i}.b"] = np.zeros(dims[i + 1])
    return {k: v.astype(dt) for k, v in params.items()}


def _check(t: Tensor, layer: str) -> Tensor:
    if np.isnan(t.data).any():
        raise ModelNaNError(f"NaN in activations at layer {layer}")
    return t


def forward_params(params: dict, x: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """(features h, logits a) for an NCHW input using the given parameter set."""
    act = cfg.activation
    if cfg.backbone == "mlp":
        if tuple(x.shape[1:]) != (cfg.input_shape[2], cfg.input_shape[0], cfg.input_shape[1]):
            raise ad.ShapeError(f"mlp backbone needs inputs of shape {cfg.input_shape}, got NCHW {x.shape}")
        h = ad.flatten(x)
        for i in range(3):
            h = ad.linear(h, params[f"backbone.fc{i}.w"], params[f"backbone.fc{i}.b"])
            if i < 2:
                h = ad.activation(h, act)
            _check(h, f"backbone.fc{i}")
    else:
        h = x
        for i in range(CONV_BLOCKS):
            h = ad.conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"], stride=2, padding=1)
            h = _check(ad.activation(h, act), f"backbone.conv{i}")
        h = ad.global_avg_pool(h)
    a = h
    for i in range(HEAD_LAYERS):
        a = ad.linear(a, params[f"head.fc{i}.w"], params[f"head.fc{i}.b"])
        if i < HEAD_LAYERS - 1:
            a = ad.activation(a, act)
        _check(a, f"head.fc{i}")
    return h, a


def momentum_schedule(step: int, total_steps: int, m_start: float = 0.996, m_end: float = 1.0) -> float:
    """Cosine ramp of the EMA momentum from m_start (step 0) to m_end (step total_steps)."""
    if total_steps <= 0:
        return m_end
    step = min(max(step, 0), total_steps)
    return m_end - (m_end - m_start) * (math.cos(math.pi * step / total_steps) + 1) / 2


@dataclass
class ModelPair:
    """Student and EMA teacher sharing one architecture.

    Student parameters are trainable tensors; teacher parameters are plain
    arrays that only change through :meth:`ema_update` and head resets.
    """

    config: ModelConfig
    student: dict[str, Tensor]
    teacher: dict[str, np.ndarray]
    reset_period: int = 0
    reset_teacher: bool = True
    m_start: float = 0.996
    m_end: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def head_names(self) -> list[str]:
        return [k for k in self.student if k.startswith("head.")]

    @property
    def backbone_names(self) -> list[str]:
        return [k for k in self.student if k.startswith("backbone.")]

    def prepare(self, x) -> Tensor:
        """NHWC pixels in [0, 255] to a normalized NCHW tensor."""
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        dt = np.dtype(self.config.dtype)
        v = x.astype(dt) / dt.type(255.0)
        if self.config.pixel_mean is not None:
            v = (v - np.asarray(self.config.pixel_mean, dtype=dt)) / np.asarray(self.config.pixel_std, dtype=dt)
        return Tensor(np.ascontiguousarray(v.transpose(0, 3, 1, 2)))

    def forward(self, branch: str, x) -> tuple[Tensor, Tensor]:
        xt = self.prepare(x)
        if branch == "student":
            return forward_params(self.student, xt, self.config)
        if branch == "teacher":
            with ad.no_grad():
                return forward_params({k: Tensor(v) for k, v in self.teacher.items()}, xt, self.config)
        raise ValueError(f"unknown branch {branch!r}")

    def ema_update(self, m: float) -> None:
        """teacher <- m * teacher + (1 - m) * student, for every parameter."""
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
        for k, t in self.teacher.items():
            dt = t.dtype.type
            self.teacher[k] = dt(m) * t + dt(1.0 - m) * self.student[k].data

    def resets_at(self, epoch: int) -> bool:
        n = self.reset_period
        return n > 0 and epoch > 0 and epoch % n == 0

    def reset_heads(self, epoch: int | None = None) -> bool:
        """Draw a fresh head from the init distribution if ``epoch`` is a reset epoch.

        Passing ``epoch=None`` forces a reset. The same draw goes to the
        teacher unless ``reset_teacher`` is off. Returns whether a reset happened.
        """
        if epoch is not None and not self.resets_at(epoch):
            return False
        fresh = init_head(self.config, self.rng)
        for k, v in fresh.items():
            self.student[k] = Tensor(v.copy(), requires_grad=True)
            if self.reset_teacher:
                self.teacher[k] = v.copy()
        return True

    def parameter_distance(self) -> float:
        return float(sum(np.abs(self.teacher[k] - self.student[k].data).sum() for k in self.teacher))

    def zero_grad(self) -> None:
        for t in self.student.values():
            t.grad = None


def init_model(
    cfg: ModelConfig,
    reset_period: int = 0,
    reset_teacher: bool = True,
    m_start: float = 0.996,
    m_end: float = 1.0,
) -> ModelPair:
    """Seeded student; the teacher starts as an exact copy."""
    rng = np.random.default_rng([cfg.init_seed, 0])
    params = init_backbone(cfg, rng)
    params.update(init_head(cfg, rng))
    student = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    teacher = {k: v.copy() for k, v in params.items()}
    return ModelPair(
        config=cfg,
        student=student,
        teacher=teacher,
        reset_period=reset_period,
        reset_teacher=reset_teacher,
        m_start=m_start,
        m_end=m_end,
        rng=np.random.default_rng([cfg.init_seed, 1]),
    )
