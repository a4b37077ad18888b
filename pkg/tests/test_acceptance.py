"""Acceptance gate: one test per criterion, each printing a PASS/FAIL verdict line.

Criteria 6, 7 and 11 share one session fixture that trains the smoke
configuration for three seeds at beta = 0.1 and beta = 0 (six runs, roughly
three minutes each on one core).
"""

import json
import math
import time

import numpy as np
import pytest

from bits import verify
from bits.codes import (
    BinaryCodeSet,
    code_entropy,
    extract,
    factor_bit_mutual_information,
    retrieval_map,
    subsample_bits,
)
from bits.data import AugmentPolicy, SyntheticFactorSpec, generate_synthetic
from bits.model import ModelConfig, ModelPair, init_model
from bits.trainer import AdamW, TrainConfig, load_checkpoint, train, train_step

from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2)
CONTEXT = 3  # factor column of the context flag


def report(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n:>2}: {title} -- {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert passed, line


def summarize(results):
    return "; ".join(f"{r.name}: {r.detail}" for r in results)


# --- oracle criteria ---------------------------------------------------------------


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    results = verify.check_loss_gradients(n_instances=100, max_elements=128)
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in results) and dt < 60
    report(1, "loss gradients vs central differences", ok, f"{summarize(results)}; {dt:.1f}s")


def test_c02_coding_rate_oracle():
    r = verify.check_coding_rate_oracle(n_cases=50)
    report(2, "coding rate vs Jacobi eigenvalues", r.passed, r.detail)


def test_c03_retrieval_oracle():
    r = verify.check_map_oracle(n_cases=20)
    report(3, "mAP vs brute force", r.passed, r.detail)


def test_c04_spectral_identities():
    r = verify.check_spectral_identities()
    report(4, "d_eff / r_eff identities", r.passed, r.detail)


def test_c05_entropy_estimators():
    r = verify.check_entropy_oracles()
    report(5, "entropy estimators", r.passed, r.detail)


# --- smoke runs (criteria 6, 7, 11) -----------------------------------------------------


def smoke_config(seed: int, beta: float) -> TrainConfig:
    return TrainConfig(
        epochs=20,
        batch_size=128,
        beta=beta,
        eps=0.1,
        m_start=0.9,
        reset_period=0,
        bit_normalization="sum-over-bits",
        seed=seed,
        model=ModelConfig(backbone="small-conv", backbone_dim=128, head_out=64, head_init_std=None,
                          head_last_scale=1.0, init_seed=seed),
    )


def max_mi_vs_null(codes: BinaryCodeSet, flag: np.ndarray, shuffles: int = 200, seed: int = 0):
    observed = factor_bit_mutual_information(codes, flag).max()
    rng = np.random.default_rng(seed)
    null = [factor_bit_mutual_information(codes, rng.permutation(flag)).max() for _ in range(shuffles)]
    return float(observed), float(np.percentile(null, 99))


@pytest.fixture(scope="session")
def smoke():
    train_ds = generate_synthetic(SyntheticFactorSpec(), seed=0)
    held = generate_synthetic(SyntheticFactorSpec(samples_per_combination=4), seed=1)
    assert train_ds.n == 2560
    out = {}
    for seed in SEEDS:
        for beta in (0.1, 0.0):
            t0 = time.perf_counter()
            res = train(smoke_config(seed, beta), train_ds)
            teacher = extract(res.pair, held, "codes", "teacher")
            student = extract(res.pair, held, "codes", "student")
            row = {
                "seconds": time.perf_counter() - t0,
                "finite": all(math.isfinite(m["total"]) for m in res.metrics),
                "agreement": float(np.mean(teacher.unpack() == student.unpack())),
                "entropy": code_entropy(teacher).marginal_mean,
            }
            if beta > 0:
                row["map"] = {
                    m: float(np.mean([retrieval_map(subsample_bits(teacher, m, s), "hamming") for s in range(3)]))
                    for m in (64, 32, 16, 8)
                }
                row["mi"], row["mi_null99"] = max_mi_vs_null(teacher, held.factors[:, CONTEXT])
            out[(seed, beta)] = row
            print(f"smoke seed={seed} beta={beta}: {json.dumps(row)}")
    return out


def test_c06_training_smoke_and_anti_collapse(smoke):
    per_seed = []
    for seed in SEEDS:
        on, off = smoke[(seed, 0.1)], smoke[(seed, 0.0)]
        ok = (on["finite"] and on["agreement"] >= 0.90 and on["entropy"] >= 0.6
              and off["entropy"] <= on["entropy"] - 0.2)
        per_seed.append(ok)
    detail = ", ".join(
        f"seed {s}: agree {smoke[(s, 0.1)]['agreement']:.3f} H {smoke[(s, 0.1)]['entropy']:.3f} "
        f"H(beta=0) {smoke[(s, 0.0)]['entropy']:.3f} {'ok' if ok else 'miss'}"
        for s, ok in zip(SEEDS, per_seed)
    )
    minutes = sum(r["seconds"] for r in smoke.values()) / 60
    report(6, "smoke run + anti-collapse (>= 2 of 3 seeds)", sum(per_seed) >= 2, f"{detail}; {minutes:.1f} min total")


def test_c07_bit_subsampling_trend(smoke):
    per_seed = []
    for seed in SEEDS:
        m = smoke[(seed, 0.1)]["map"]
        curve = [m[64], m[32], m[16], m[8]]
        per_seed.append(all(b <= a + 0.01 for a, b in zip(curve, curve[1:])))
    detail = ", ".join(
        f"seed {s}: " + "/".join(f"{smoke[(s, 0.1)]['map'][b]:.3f}" for b in (64, 32, 16, 8)) + (" ok" if ok else " miss")
        for s, ok in zip(SEEDS, per_seed)
    )
    report(7, "Hamming mAP non-increasing 64->32->16->8 bits (>= 2 of 3 runs)", sum(per_seed) >= 2, detail)


def test_c11_context_factor_signal(smoke):
    per_seed = [smoke[(s, 0.1)]["mi"] > smoke[(s, 0.1)]["mi_null99"] for s in SEEDS]
    detail = ", ".join(
        f"seed {s}: max MI {smoke[(s, 0.1)]['mi']:.4f} vs null p99 {smoke[(s, 0.1)]['mi_null99']:.4f}"
        for s in SEEDS
    )
    report(11, "bit-context MI above shuffled null (>= 2 of 3 runs)", sum(per_seed) >= 2, detail)


# --- training mechanics -------------------------------------------------------------------


def small_dataset():
    spec = SyntheticFactorSpec(n_shapes=2, n_colors=4, n_backgrounds=2, n_context=2, image_size=16, samples_per_combination=4)
    return generate_synthetic(spec, seed=0)


def small_config(**kw) -> TrainConfig:
    base = dict(
        epochs=3,
        batch_size=32,
        warmup_epochs=1,
        reset_period=0,
        model=ModelConfig(backbone="small-conv", backbone_dim=16, head_hidden=32, head_out=16),
        augment=AugmentPolicy(n_local=2),
    )
    base.update(kw)
    return TrainConfig(**base)


def test_c08_reset_mechanics(monkeypatch):
    events = []
    original = ModelPair.reset_heads

    def watched(self, epoch=None):
        before = {k: t.data.copy() for k, t in self.student.items()}
        fired = original(self, epoch)
        if fired:
            after = {k: t.data for k, t in self.student.items()}
            events.append((
                epoch,
                all(not np.array_equal(before[k], after[k]) for k in self.head_names if k.endswith(".w")),
                all(np.array_equal(before[k], after[k]) for k in self.backbone_names),
            ))
        return fired

    monkeypatch.setattr(ModelPair, "reset_heads", watched)
    res = train(small_config(epochs=12, reset_period=5), small_dataset())
    after_first = [m for m in res.metrics if m["epoch"] >= 5]
    ok = (
        res.reset_epochs == [5, 10]
        and [e for e, _, _ in events] == [5, 10]
        and all(head and backbone for _, head, backbone in events)
        and all(math.isfinite(m["total"]) for m in after_first)
    )
    report(8, "head resets at 5 and 10 over 12 epochs", ok,
           f"reset epochs {res.reset_epochs}, head changed/backbone kept {[(h, b) for _, h, b in events]}, "
           f"{len(after_first)} finite post-reset steps")


def test_c09_ema_exactness():
    cfg = small_config(m_start=1.0, m_end=1.0)
    ds = small_dataset()
    from bits.data import batch_views

    pair = init_model(cfg.model)
    opt = AdamW()
    frozen = {k: v.copy() for k, v in pair.teacher.items()}
    for s in range(10):
        views = batch_views(ds, np.arange(s, s + 32), cfg.augment, 0, s)
        train_step(pair, opt, views, cfg, step=s, total_steps=10)
    frozen_ok = all(np.array_equal(frozen[k], pair.teacher[k]) for k in frozen) and pair.parameter_distance() > 0

    cfg0 = small_config(m_start=0.0, m_end=0.0)
    pair = init_model(cfg0.model)
    opt = AdamW()
    copy_ok = True
    for s in range(5):
        views = batch_views(ds, np.arange(s, s + 32), cfg0.augment, 0, s)
        train_step(pair, opt, views, cfg0, step=s, total_steps=5)
        copy_ok &= all(np.array_equal(pair.student[k].data, pair.teacher[k]) for k in pair.teacher)

    # scalar recursion t <- m t + (1 - m) s by hand: 2 -> 3 -> 6.75 -> 1.0625, all exact in float32
    pair = init_model(cfg.model)
    k = "head.fc2.b"
    shape = pair.teacher[k].shape
    pair.teacher[k] = np.full(shape, 2.0, np.float32)
    t_hand = 2.0
    for m, s in ((0.5, 4.0), (0.25, 8.0), (0.75, -16.0)):
        pair.student[k].data = np.full(shape, s, np.float32)
        pair.ema_update(m)
        t_hand = m * t_hand + (1 - m) * s
    scalar_ok = t_hand == 1.0625 and bool(np.all(pair.teacher[k] == np.float32(t_hand)))
    report(9, "EMA exactness", frozen_ok and copy_ok and scalar_ok,
           f"m=1 frozen over 10 steps: {frozen_ok}; m=0 copies student: {copy_ok}; 3-step recursion -> {t_hand}: {scalar_ok}")


def test_c10_determinism(tmp_path):
    ds = small_dataset()
    a = train(small_config(), ds, out_dir=tmp_path / "a")
    train(small_config(), ds, out_dir=tmp_path / "b")
    train(small_config(), ds, out_dir=tmp_path / "c", resume=tmp_path / "a" / "ckpt_epoch001")
    rows_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    same_runs = rows_a == (tmp_path / "b" / "metrics.jsonl").read_bytes() and (
        (tmp_path / "a" / "ckpt_epoch003").read_bytes() == (tmp_path / "b" / "ckpt_epoch003").read_bytes()
    )
    spe = len(a.metrics) // 3
    tail = b"".join(line + b"\n" for line in rows_a.splitlines()[spe:])
    resumed = (tmp_path / "c" / "metrics.jsonl").read_bytes() == tail and (
        (tmp_path / "a" / "ckpt_epoch003").read_bytes() == (tmp_path / "c" / "ckpt_epoch003").read_bytes()
    )
    ck = load_checkpoint(tmp_path / "c" / "ckpt_epoch003")
    report(10, "bitwise determinism and resume", same_runs and resumed and ck.epoch == 3,
           f"identical reruns: {same_runs}; resume from epoch 1 matches: {resumed}")
