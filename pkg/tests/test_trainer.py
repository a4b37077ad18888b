import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bits import autodiff as ad
from bits.data import AugmentPolicy, ImageDataset
from bits.model import ModelConfig, init_model
from bits.trainer import (
    AdamW,
    CheckpointError,
    TrainConfig,
    clip_gradients,
    finetune,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
    train_step,
)


def tiny_dataset(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return ImageDataset(rng.integers(0, 256, size=(n, 8, 8, 3), dtype=np.uint8), rng.integers(0, 3, size=n))


def tiny_config(**kw):
    model = ModelConfig(backbone="mlp", input_shape=(8, 8, 3), backbone_dim=16, head_hidden=32, head_out=16, mlp_hidden=32)
    base = dict(epochs=3, batch_size=8, warmup_epochs=1, reset_period=0, model=model, augment=AugmentPolicy(noise_std=0.0))
    base.update(kw)
    return TrainConfig(**base)


# --- schedules ----------------------------------------------------------------


def test_lr_warmup_end_and_final_step():
    assert lr_schedule(0, 100, 1e-3, 5e-5, 10) == 0.0
    assert lr_schedule(10, 100, 1e-3, 5e-5, 10) == 1e-3
    assert lr_schedule(99, 100, 1e-3, 5e-5, 10) == 5e-5
    assert lr_schedule(5, 100, 1e-3, 5e-5, 10) == pytest.approx(5e-4)


def test_lr_monotone_after_warmup():
    vals = [lr_schedule(s, 57, 2e-3, 1e-4, 7) for s in range(57)]
    assert all(a >= b for a, b in zip(vals[7:], vals[8:]))
    assert all(a <= b for a, b in zip(vals[:7], vals[1:8]))
    assert min(vals[7:]) == 1e-4


def test_clip_leaves_small_norm_alone():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5)
    assert np.array_equal(out["a"], g["a"])


def test_clip_scales_large_norm_and_keeps_direction():
    g = {"a": np.array([[2.0, 0.0]]), "b": np.array([2.0, 2.0, 2.0])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(4.0)
    pre = np.concatenate([v.ravel() for v in g.values()])
    post = np.concatenate([v.ravel() for v in out.values()])
    assert np.linalg.norm(post) == pytest.approx(1.0, abs=1e-6)
    assert pre @ post / (np.linalg.norm(pre) * np.linalg.norm(post)) == pytest.approx(1.0, abs=1e-6)


def test_clip_rejects_nan_and_bad_threshold():
    with pytest.raises(FloatingPointError):
        clip_gradients({"a": np.array([np.nan])}, 1.0)
    with pytest.raises(ValueError):
        clip_gradients({"a": np.zeros(1)}, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_clip_never_exceeds_threshold(cg, seed):
    rng = np.random.default_rng(seed)
    g = {"a": rng.standard_normal((3, 4)) * 10, "b": rng.standard_normal(5)}
    out, _ = clip_gradients(g, cg)
    total = math.sqrt(sum(float(np.sum(v * v)) for v in out.values()))
    assert total <= cg * (1 + 1e-9)


def test_adamw_first_step_is_sign_scaled_and_biases_skip_decay():
    p = {"w": ad.Tensor(np.ones((2, 2)), requires_grad=True), "b": ad.Tensor(np.ones(2), requires_grad=True)}
    opt = AdamW(weight_decay=0.5)
    opt.step(p, {"w": np.full((2, 2), 3.0), "b": np.full(2, -3.0)}, lr=0.1)
    # bias-corrected first step moves by lr * sign(g), plus decoupled decay on matrices
    np.testing.assert_allclose(p["w"].data, 1 - 0.1 * (1 + 0.5), rtol=1e-6)
    np.testing.assert_allclose(p["b"].data, 1 + 0.1, rtol=1e-6)


# --- steps ----------------------------------------------------------------------


def _views(cfg, ds, seed=0):
    from bits.data import batch_views

    return batch_views(ds, np.arange(cfg.batch_size), cfg.augment, seed, 1)


def test_zero_lr_step_keeps_student_but_applies_ema():
    cfg = tiny_config(base_lr=0.0, min_lr=0.0, m_start=0.5, m_end=0.5)
    ds = tiny_dataset()
    pair = init_model(cfg.model)
    for k in pair.teacher:
        pair.teacher[k] = pair.teacher[k] + 1.0
    before = {k: t.data.copy() for k, t in pair.student.items()}
    teacher_before = {k: v.copy() for k, v in pair.teacher.items()}
    br, info = train_step(pair, AdamW(), _views(cfg, ds), cfg, step=0, total_steps=10)
    assert info["lr"] == 0.0
    for k in before:
        assert np.array_equal(before[k], pair.student[k].data)
        np.testing.assert_allclose(pair.teacher[k], 0.5 * teacher_before[k] + 0.5 * before[k], rtol=1e-6)
    assert 0.0 <= br.agreement_rate <= 1.0


def test_momentum_one_freezes_teacher_while_student_moves():
    cfg = tiny_config(m_start=1.0, m_end=1.0, base_lr=1e-2)
    ds = tiny_dataset()
    pair = init_model(cfg.model)
    opt = AdamW()
    teacher0 = {k: v.copy() for k, v in pair.teacher.items()}
    for s in range(3):
        train_step(pair, opt, _views(cfg, ds, s), cfg, step=s, total_steps=10)
    assert all(np.array_equal(teacher0[k], pair.teacher[k]) for k in teacher0)
    assert pair.parameter_distance() > 0


def test_step_is_reproducible():
    cfg = tiny_config()
    ds = tiny_dataset()
    outs = []
    for _ in range(2):
        pair = init_model(cfg.model)
        train_step(pair, AdamW(), _views(cfg, ds), cfg, step=3, total_steps=10, warmup_steps=2)
        outs.append({k: t.data.copy() for k, t in pair.student.items()})
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


# --- loops --------------------------------------------------------------------------


def test_train_writes_metrics_and_checkpoints(tmp_path):
    res = train(tiny_config(), tiny_dataset(), out_dir=tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 9
    assert list(rows[0]) == ["epoch", "step", "lr", "m", "bce", "rate", "total", "agreement_rate", "grad_norm"]
    assert [r["step"] for r in rows] == list(range(9))
    assert all(math.isfinite(r["total"]) and 0 <= r["agreement_rate"] <= 1 for r in rows)
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch001", "ckpt_epoch002", "ckpt_epoch003"]
    assert rows[-1]["lr"] == tiny_config().min_lr
    assert not list(tmp_path.glob("*.tmp"))


def test_reset_epochs_over_twenty_five():
    cfg = tiny_config(epochs=25, reset_period=10, batch_size=24)
    res = train(cfg, tiny_dataset())
    assert res.reset_epochs == [10, 20]


def test_resume_matches_uninterrupted_run(tmp_path):
    full = train(tiny_config(), tiny_dataset(), out_dir=tmp_path / "full")
    train(tiny_config(epochs=3), tiny_dataset(), out_dir=tmp_path / "part")
    (tmp_path / "part" / "metrics.jsonl").unlink()
    resumed = train(tiny_config(), tiny_dataset(), out_dir=tmp_path / "part", resume=tmp_path / "part" / "ckpt_epoch001")
    full_rows = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    assert (tmp_path / "part" / "metrics.jsonl").read_text().splitlines() == full_rows[3:]
    for k, t in full.pair.student.items():
        assert np.array_equal(t.data, resumed.pair.student[k].data)
    a = (tmp_path / "full" / "ckpt_epoch003").read_bytes()
    b = (tmp_path / "part" / "ckpt_epoch003").read_bytes()
    assert a == b


def test_finetune_one_epoch_equals_one_more_training_epoch(tmp_path):
    ds = tiny_dataset()
    train(tiny_config(epochs=3), ds, out_dir=tmp_path / "full")
    ft = finetune(tiny_config(epochs=1), tmp_path / "full" / "ckpt_epoch002", ds, out_dir=tmp_path / "ft")
    ck = load_checkpoint(tmp_path / "full" / "ckpt_epoch003")
    assert ft.epoch == 3
    for k, t in ft.pair.student.items():
        assert np.array_equal(t.data, ck.student[k])


def test_finetune_reset_at_start_changes_heads_only(tmp_path):
    ds = tiny_dataset()
    train(tiny_config(epochs=1), ds, out_dir=tmp_path / "base")
    ck = load_checkpoint(tmp_path / "base" / "ckpt_epoch001")
    cfg = tiny_config(epochs=1, base_lr=0.0, min_lr=0.0, m_start=1.0, m_end=1.0)
    ft = finetune(cfg, tmp_path / "base" / "ckpt_epoch001", ds, reset_at_start=True)
    for k in ft.pair.backbone_names:
        assert np.array_equal(ft.pair.student[k].data, ck.student[k])
    assert any(not np.array_equal(ft.pair.student[k].data, ck.student[k]) for k in ft.pair.head_names)


def test_finetune_shape_mismatch_lists_parameters(tmp_path):
    ds = tiny_dataset()
    train(tiny_config(epochs=1), ds, out_dir=tmp_path / "base")
    other = ImageDataset(np.zeros((24, 6, 6, 3), np.uint8))
    with pytest.raises(ad.ShapeError, match="backbone.fc0.w"):
        finetune(tiny_config(epochs=1), tmp_path / "base" / "ckpt_epoch001", other)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    cfg = tiny_config()
    pair = init_model(cfg.model)
    path = save_checkpoint(tmp_path / "c", cfg, pair, AdamW(), epoch=4, step=12)
    ck = load_checkpoint(path)
    assert (ck.epoch, ck.step) == (4, 12)
    assert ck.config.to_dict() == cfg.to_dict()
    for k, t in pair.student.items():
        assert np.array_equal(ck.student[k], t.data)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(min_lr=1.0, base_lr=0.1)
    with pytest.raises(ValueError):
        tiny_config(batch_size=1)
    with pytest.raises(ValueError):
        tiny_config(agreement="nope")
