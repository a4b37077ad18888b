"""Training loop, optimizer, schedules and checkpoints."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .data import AugmentPolicy, ImageDataset, batch_views
from .model import ModelConfig, ModelPair, init_model, momentum_schedule
from .objective import AgreementConfig, DivergenceError, LossBreakdown, loss_from_logits

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BITSCKPT"
CKPT_VERSION = 1
METRIC_KEYS = ("epoch", "step", "lr", "m", "bce", "rate", "total", "agreement_rate", "grad_norm")


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 1e-3
    min_lr: float = 5e-5
    warmup_epochs: int = 3
    weight_decay: float = 0.04
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    clip_norm: float = 1.0
    beta: float = 0.1
    eps: float = 0.5
    tau: float = 0.1
    agreement: str = "bce-hard"
    bit_normalization: str = "mean-over-bits"
    rate_scale: float | None = None
    reset_period: int = 10
    reset_teacher: bool = True
    m_start: float = 0.996
    m_end: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1
    workers: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must be <= base_lr")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.reset_period < 0:
            raise ValueError("reset_period must be >= 0")
        self.agreement_config()  # validates mode/eps/tau

    def agreement_config(self) -> AgreementConfig:
        return AgreementConfig(
            mode=self.agreement,
            beta=self.beta,
            eps=self.eps,
            tau=self.tau,
            bit_normalization=self.bit_normalization,
            rate_scale=self.rate_scale,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        aug = d.pop("augment", {})
        aug = AugmentPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
        names = {f.name for f in fields(cls)}
        return cls(model=model, augment=aug, **{k: v for k, v in d.items() if k in names})


# --- schedules and optimizer ------------------------------------------------


def lr_schedule(step: int, total_steps: int, base_lr: float, min_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay reaching min_lr at step total_steps - 1."""
    last = total_steps - 1
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= last:
        return min_lr if last > warmup_steps or warmup_steps == 0 else base_lr
    progress = (step - warmup_steps) / (last - warmup_steps)
    return min_lr + (base_lr - min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / g when the global L2 norm g exceeds max_norm.

    Returns the (possibly) scaled gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise DivergenceError(f"gradient norm is {norm}")
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * g.dtype.type(s) for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay; matrices and kernels decay, biases do not.

    Step counts are kept per parameter so that clearing a parameter's state
    restarts its bias correction.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0, eps: float = 1e-8):
        self.beta1, self.beta2, self.weight_decay, self.eps = beta1, beta2, weight_decay, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for k, p in params.items():
            g = grads[k]
            dt = p.data.dtype.type
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = dt(b1) * self.m[k] + dt(1 - b1) * g
            self.v[k] = dt(b2) * self.v[k] + dt(1 - b2) * g * g
            mhat = self.m[k] / dt(1 - b1**t)
            vhat = self.v[k] / dt(1 - b2**t)
            update = mhat / (np.sqrt(vhat) + dt(self.eps))
            if self.weight_decay and p.data.ndim > 1:
                update = update + dt(self.weight_decay) * p.data
            p.data = p.data - dt(lr) * update

    def clear(self, names) -> None:
        for k in names:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    step: int
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_t: dict[str, int]
    rng_state: dict

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"student/{k}": v for k, v in self.student.items()}
        out.update({f"teacher/{k}": v for k, v in self.teacher.items()})
        return out


def _pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _pack_blob(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def entries(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (ln,) = self.unpack("<H")
            name = self.take(ln).decode()
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * size), "<f4").reshape(shape).astype(np.float32)
        return out


def save_checkpoint(path, cfg: TrainConfig, pair: ModelPair, opt: AdamW, epoch: int, step: int) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    params = {f"student/{k}": t.data for k, t in pair.student.items()}
    params.update({f"teacher/{k}": v for k, v in pair.teacher.items()})
    opt_entries = {f"m/{k}": v for k, v in opt.m.items()}
    opt_entries.update({f"v/{k}": v for k, v in opt.v.items()})
    state = {
        "epoch": epoch,
        "step": step,
        "opt_t": opt.t,
        "reset_rng": pair.rng.bit_generator.state,
    }
    payload = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<I", CKPT_VERSION),
            _pack_blob(json.dumps(cfg.to_dict(), sort_keys=True).encode()),
            _pack_entries(params),
            _pack_entries(opt_entries),
            _pack_blob(json.dumps(state, sort_keys=True).encode()),
        ]
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a BITSCKPT file")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = TrainConfig.from_dict(json.loads(r.blob()))
    params = r.entries()
    opt_entries = r.entries()
    state = json.loads(r.blob())
    return Checkpoint(
        config=cfg,
        epoch=state["epoch"],
        step=state["step"],
        student={k[8:]: v for k, v in params.items() if k.startswith("student/")},
        teacher={k[8:]: v for k, v in params.items() if k.startswith("teacher/")},
        opt_m={k[2:]: v for k, v in opt_entries.items() if k.startswith("m/")},
        opt_v={k[2:]: v for k, v in opt_entries.items() if k.startswith("v/")},
        opt_t={k: int(v) for k, v in state["opt_t"].items()},
        rng_state=state["reset_rng"],
    )


def restore(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> tuple[ModelPair, AdamW]:
    """Rebuild the model pair and optimizer state stored in a checkpoint."""
    cfg = cfg or ckpt.config
    pair = init_model(ckpt.config.model, cfg.reset_period, cfg.reset_teacher, cfg.m_start, cfg.m_end)
    _check_shapes(pair, ckpt)
    for k, v in ckpt.student.items():
        pair.student[k] = ad.Tensor(v.copy(), requires_grad=True)
        pair.teacher[k] = ckpt.teacher[k].copy()
    pair.rng.bit_generator.state = ckpt.rng_state
    opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay)
    opt.m = {k: v.copy() for k, v in ckpt.opt_m.items()}
    opt.v = {k: v.copy() for k, v in ckpt.opt_v.items()}
    opt.t = dict(ckpt.opt_t)
    return pair, opt


def _check_shapes(pair: ModelPair, ckpt: Checkpoint) -> None:
    bad = []
    for k, t in pair.student.items():
        for branch in (ckpt.student, ckpt.teacher):
            if k not in branch:
                bad.append(f"{k}: missing")
            elif branch[k].shape != t.shape:
                bad.append(f"{k}: checkpoint {branch[k].shape} vs model {t.shape}")
    extra = set(ckpt.student) - set(pair.student)
    bad += [f"{k}: not in model" for k in sorted(extra)]
    if bad:
        raise ad.ShapeError("checkpoint does not match the model: " + "; ".join(sorted(set(bad))))


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    pair: ModelPair
    optimizer: AdamW
    metrics: list[dict]
    checkpoints: list[Path]
    reset_epochs: list[int]
    epoch: int
    step: int


@contextlib.contextmanager
def thread_limits(workers: int):
    """workers == 0 pins BLAS to one thread (the deterministic mode)."""
    env = os.environ.get("BITS_THREADS")
    n = int(env) if env not in (None, "") else workers
    with threadpool_limits(limits=max(1, n)):
        yield n


def prepare_config(cfg: TrainConfig, dataset: ImageDataset) -> TrainConfig:
    model = cfg.model
    if tuple(model.input_shape) != dataset.image_shape:
        model.input_shape = dataset.image_shape
    if model.pixel_mean is None:
        model.pixel_mean, model.pixel_std = dataset.channel_stats()
    if model.backbone == "mlp" and cfg.augment.n_local and cfg.augment.local_size is None:
        # the mlp backbone only accepts full-size inputs
        cfg.augment.local_size = dataset.image_shape[0]
    return cfg


def steps_per_epoch(cfg: TrainConfig, n: int) -> int:
    spe = n // cfg.batch_size
    if spe < 1:
        raise ValueError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    return spe


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 2**31]).permutation(n)


def train_step(
    pair: ModelPair,
    opt: AdamW,
    views: list[np.ndarray],
    cfg: TrainConfig,
    step: int,
    total_steps: int,
    warmup_steps: int = 0,
) -> tuple[LossBreakdown, dict]:
    """One update: teacher targets, student loss, backward, clip, AdamW, EMA."""
    n_global = cfg.augment.n_global
    teacher_logits = [pair.forward("teacher", v)[1].data for v in views[:n_global]]
    student_logits = [pair.forward("student", v)[1] for v in views]
    loss, br = loss_from_logits(student_logits, teacher_logits, cfg.agreement_config(), n_global)
    pair.zero_grad()
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in pair.student.items()}
    grads, norm = clip_gradients(grads, cfg.clip_norm)
    lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.min_lr, warmup_steps)
    opt.step(pair.student, grads, lr)
    m = momentum_schedule(step, max(total_steps - 1, 1), cfg.m_start, cfg.m_end)
    pair.ema_update(m)
    pair.zero_grad()
    return br, {"lr": lr, "m": m, "grad_norm": norm}


def _run(
    cfg: TrainConfig,
    pair: ModelPair,
    opt: AdamW,
    dataset: ImageDataset,
    first_epoch: int,
    last_epoch: int,
    step: int,
    total_steps: int,
    out_dir: Path | None,
    reset_first: bool = False,
) -> TrainResult:
    spe = steps_per_epoch(cfg, dataset.n)
    metrics, ckpts, resets = [], [], []
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
    epoch = first_epoch - 1
    with thread_limits(cfg.workers) as workers:
        if reset_first:
            pair.reset_heads(None)
            opt.clear(pair.head_names)
        for epoch in range(first_epoch, last_epoch + 1):
            if pair.reset_heads(epoch):
                opt.clear(pair.head_names)
                resets.append(epoch)
                log.info("head reset at epoch %d", epoch)
            order = epoch_order(cfg.seed, epoch, dataset.n)
            for b in range(spe):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                views = batch_views(dataset, idx, cfg.augment, cfg.seed, epoch, workers)
                try:
                    br, info = train_step(pair, opt, views, cfg, step, total_steps, cfg.warmup_epochs * spe)
                except (DivergenceError, FloatingPointError):
                    if out_dir is not None:
                        save_checkpoint(out_dir / "ckpt_failure", cfg, pair, opt, epoch, step)
                    raise
                row = {"epoch": epoch, "step": step, "lr": info["lr"], "m": info["m"], **br.as_dict(),
                       "grad_norm": info["grad_norm"]}
                row = {k: row[k] for k in METRIC_KEYS}
                metrics.append(row)
                if metrics_path is not None:
                    with open(metrics_path, "a") as f:
                        f.write(json.dumps(row) + "\n")
                step += 1
            log.info("epoch %d: %s", epoch, metrics[-1])
            if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == last_epoch):
                ckpts.append(save_checkpoint(out_dir / f"ckpt_epoch{epoch:03d}", cfg, pair, opt, epoch, step))
    return TrainResult(pair, opt, metrics, ckpts, resets, epoch, step)


def train(cfg: TrainConfig, dataset: ImageDataset, out_dir=None, resume=None) -> TrainResult:
    """Train from scratch, or continue an interrupted run from ``resume`` (a checkpoint path)."""
    out_dir = Path(out_dir) if out_dir is not None else None
    spe = steps_per_epoch(cfg, dataset.n)
    total = cfg.epochs * spe
    if resume is not None:
        ckpt = load_checkpoint(resume)
        pair, opt = restore(ckpt, cfg)
        cfg.model = ckpt.config.model
        first, step = ckpt.epoch + 1, ckpt.step
    else:
        cfg = prepare_config(cfg, dataset)
        pair = init_model(cfg.model, cfg.reset_period, cfg.reset_teacher, cfg.m_start, cfg.m_end)
        opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay)
        first, step = 1, 0
    return _run(cfg, pair, opt, dataset, first, cfg.epochs, step, total, out_dir)


def finetune(cfg: TrainConfig, checkpoint, dataset: ImageDataset, out_dir=None, reset_at_start: bool = False) -> TrainResult:
    """Continue self-supervised training of a checkpoint on ``dataset`` for ``cfg.epochs`` more epochs.

    Weights, optimizer state and the head-reset generator carry over; epoch
    and step counters continue from the checkpoint, and the schedules span the
    checkpoint's steps plus the new ones. ``reset_at_start`` draws one fresh
    head before the first fine-tuning epoch.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = load_checkpoint(checkpoint)
    probe = init_model(ModelConfig(**{**asdict(cfg.model), "input_shape": dataset.image_shape}))
    _check_shapes(probe, ckpt)
    pair, opt = restore(ckpt, cfg)
    cfg.model = ckpt.config.model
    spe = steps_per_epoch(cfg, dataset.n)
    total = ckpt.step + cfg.epochs * spe
    last = ckpt.epoch + cfg.epochs
    return _run(cfg, pair, opt, dataset, ckpt.epoch + 1, last, ckpt.step, total, out_dir, reset_first=reset_at_start)
