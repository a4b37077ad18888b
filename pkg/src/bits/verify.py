"""Self-checks: finite-difference gradients and independent numerical oracles.

Each check returns a :class:`CheckResult`; :func:`run_all` collects them for
``bits verify``. The tiny-model instances here are shared with the test suite.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .codes import BinaryCodeSet, FeatureSet, code_entropy, retrieval_map
from .objective import AgreementConfig, binary_agreement_loss, coding_rate, default_pairing, loss_from_logits
from .spectral import effective_dimension, effective_rank, eig_sym_psd

TINY_D, TINY_B, TINY_N = 16, 16, 8
GRAD_TOL = {np.float32: 1e-3, np.float64: 1e-6}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# --- tiny model instances ---------------------------------------------------


@dataclass
class TinyInstance:
    """Two augmented views through a one-hidden-layer head, plus fixed teacher logits."""

    views: list[np.ndarray]  # 2 x [N, d]
    params: list[np.ndarray]  # w1 [d, d], b1 [d], w2 [d, B], b2 [B]
    teacher: list[np.ndarray]  # 2 x [N, B]

    def logits(self, w1, b1, w2, b2) -> list[ad.Tensor]:
        out = []
        for v in self.views:
            x = ad.Tensor(v.astype(w1.dtype))
            h = ad.gelu(ad.linear(x, w1, b1))
            out.append(ad.linear(h, w2, b2))
        return out


def tiny_instance(seed: int, dtype=np.float64, d: int = TINY_D, bits: int = TINY_B, n: int = TINY_N) -> TinyInstance:
    rng = np.random.default_rng([seed, 7])
    views = [rng.standard_normal((n, d)) for _ in range(2)]
    params = [
        rng.standard_normal((d, d)) / np.sqrt(d),
        0.1 * rng.standard_normal(d),
        rng.standard_normal((d, bits)) / np.sqrt(d),
        0.1 * rng.standard_normal(bits),
    ]
    teacher = [rng.standard_normal((n, bits)) for _ in range(2)]
    return TinyInstance(views, [p.astype(dtype) for p in params], teacher)


def tiny_losses(inst: TinyInstance, beta: float = 0.1, eps: float = 0.5) -> dict:
    """Loss closures over the head parameters for the three checked objectives."""
    bits = [(t > 0).astype(np.uint8) for t in inst.teacher]
    pairing = default_pairing(2, 2)
    cfg = AgreementConfig(beta=beta, eps=eps)

    def bce(*p):
        return binary_agreement_loss(inst.logits(*p), bits, pairing)

    def rate(*p):
        return ad.scale(coding_rate(inst.logits(*p), eps), -1.0)

    def combined(*p):
        return loss_from_logits(inst.logits(*p), inst.teacher, cfg, 2)[0]

    return {"bce": bce, "rate": rate, "combined": combined}


def check_loss_gradients(n_instances: int = 20, max_elements: int | None = 48, seed: int = 0) -> list[CheckResult]:
    out = []
    for dtype in (np.float32, np.float64):
        for name in ("bce", "rate", "combined"):
            t0 = time.perf_counter()
            worst = 0.0
            for i in range(n_instances):
                inst = tiny_instance(seed * 100003 + i, dtype)
                rep = ad.gradcheck(
                    tiny_losses(inst)[name], inst.params, max_elements=max_elements, rng=np.random.default_rng(i)
                )
                worst = max(worst, rep.max_rel_err)
            tol = GRAD_TOL[dtype]
            out.append(
                CheckResult(
                    f"grad {name} {np.dtype(dtype).name}",
                    worst <= tol,
                    f"max rel err {worst:.2e} (tol {tol:g}, {n_instances} instances)",
                    time.perf_counter() - t0,
                )
            )
    return out


def check_layer_gradients(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)

    def probe(shape):
        return np.cos(np.arange(np.prod(shape), dtype=np.float64)).reshape(shape)

    def weighted(op, shape):
        w = probe(shape)
        return lambda *xs: ad.sum_(ad.mul(op(*xs), w))

    cases = {
        "conv2d": (
            weighted(lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1), (2, 3, 3, 3)),
            [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
        ),
        "avg_pool": (weighted(ad.avg_pool2x2, (2, 2, 2, 2)), [rng.standard_normal((2, 2, 4, 4))]),
        "global_pool": (weighted(ad.global_avg_pool, (2, 3)), [rng.standard_normal((2, 3, 3, 3))]),
        "gelu": (weighted(ad.gelu, (4, 5)), [rng.standard_normal((4, 5))]),
        "relu": (weighted(ad.relu, (4, 5)), [rng.standard_normal((4, 5))]),
        "sigmoid": (weighted(ad.sigmoid, (4, 5)), [rng.standard_normal((4, 5))]),
        "normalize": (weighted(ad.l2_normalize_rows, (4, 5)), [rng.standard_normal((4, 5))]),
        "covariance": (weighted(ad.covariance, (5, 5)), [rng.standard_normal((6, 5))]),
        "matmul": (weighted(ad.matmul, (3, 5)), [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))]),
        "concat": (weighted(lambda a, b: ad.concat([a, b]), (7, 5)), [rng.standard_normal((3, 5)), rng.standard_normal((4, 5))]),
    }
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    for name, (fn, inputs) in cases.items():
        err = ad.gradcheck(fn, inputs).max_rel_err
        if err > worst:
            worst, worst_name = err, name
    return CheckResult("grad layers float64", worst <= 1e-6, f"worst {worst_name or '-'} {worst:.2e}", time.perf_counter() - t0)


# --- oracles ----------------------------------------------------------------


def check_eigensolver(n_cases: int = 20, seed: int = 0) -> CheckResult:
    """Recover a planted spectrum from a randomly rotated diagonal matrix."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(2, 24))
        lam = np.sort(rng.exponential(size=k))[::-1]
        lam[rng.random(k) < 0.2] = 0.0
        q, _ = np.linalg.qr(rng.standard_normal((k, k)))
        got = eig_sym_psd(q @ np.diag(lam) @ q.T)
        worst = max(worst, float(np.max(np.abs(got - np.sort(lam)[::-1]))))
    return CheckResult("eigen planted spectrum", worst <= 1e-8, f"max abs err {worst:.2e}", time.perf_counter() - t0)


def check_coding_rate_oracle(n_cases: int = 50, seed: int = 0, eps: float = 0.5) -> CheckResult:
    """Cholesky logdet against 0.5 * sum log(1 + c * lambda) from the Jacobi spectrum."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_cases):
        n, b = int(rng.integers(2, 40)), int(rng.integers(2, 24))
        z = rng.standard_normal((n, b))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        got = float(ad.logdet_regularized_cov(ad.Tensor(z), eps).data)
        zc = z - z.mean(axis=0)
        lam = eig_sym_psd(zc.T @ zc / n)
        want = 0.5 * float(np.sum(np.log1p(b / eps**2 * lam)))
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    collapsed = np.tile(rng.standard_normal((1, 12)), (9, 1))
    collapsed /= np.linalg.norm(collapsed, axis=1, keepdims=True)
    zero = float(ad.logdet_regularized_cov(ad.Tensor(collapsed), eps).data)
    ok = worst <= 1e-6 and zero == 0.0
    return CheckResult("coding rate vs eigen oracle", ok, f"max rel err {worst:.2e}; collapsed R = {zero!r}", time.perf_counter() - t0)


def brute_force_map(features: np.ndarray, labels: np.ndarray, metric: str = "cosine") -> float:
    """Reference mAP@ALL written with explicit loops over queries and ranks."""
    n = len(labels)
    aps = []
    for q in range(n):
        dists = []
        for j in range(n):
            if j == q:
                continue
            if metric == "cosine":
                a, b = features[q], features[j]
                na, nb = np.sqrt(np.dot(a, a)), np.sqrt(np.dot(b, b))
                dists.append((-(np.dot(a, b) / ((na + 1e-12) * (nb + 1e-12))), j))
            else:
                dists.append((int(np.sum(features[q] != features[j])), j))
        dists.sort()
        hits, precisions = 0, []
        for rank, (_, j) in enumerate(dists, start=1):
            if labels[j] == labels[q]:
                hits += 1
                precisions.append(hits / rank)
        if precisions:
            aps.append(sum(precisions) / len(precisions))
    return float(np.mean(aps))


def check_map_oracle(n_cases: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(n_cases):
        n = int(rng.integers(4, 101))
        labels = rng.integers(0, max(2, n // 6), n)
        if i % 2:
            feats = rng.standard_normal((n, 8))
            got = retrieval_map(FeatureSet(feats, labels), "cosine")
            want = brute_force_map(feats, labels, "cosine")
        else:
            bits = rng.integers(0, 2, (n, 16))
            got = retrieval_map(BinaryCodeSet.from_bits(bits, labels), "hamming")
            want = brute_force_map(bits, labels, "hamming")
        worst = max(worst, abs(got - want))
    pairs = rng.standard_normal((10, 8))
    dup = retrieval_map(FeatureSet(np.repeat(pairs, 2, axis=0), np.repeat(np.arange(10), 2)), "cosine")
    ok = worst <= 1e-9 and dup == 1.0
    return CheckResult("retrieval mAP vs brute force", ok, f"max abs err {worst:.2e}; duplicated pairs mAP {dup!r}", time.perf_counter() - t0)


def check_entropy_oracles(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    const = code_entropy(BinaryCodeSet.from_bits(np.ones((50, 64), np.uint8)), 8)
    fair = code_entropy(BinaryCodeSet.from_bits(rng.integers(0, 2, (10000, 64))), 8)
    ok = const.marginal_mean == 0.0 and const.block_mean == 0.0 and fair.marginal_mean >= 0.999 and fair.block_mean >= 7.5
    detail = f"constant {const.marginal_mean}/{const.block_mean}; fair {fair.marginal_mean:.4f}/{fair.block_mean:.3f}"
    return CheckResult("entropy estimators", ok, detail, time.perf_counter() - t0)


def check_spectral_identities(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    errs = []
    for k in (1, 3, 10):
        lam = np.r_[np.full(k, 2.5), np.zeros(4)]
        errs += [abs(effective_dimension(lam) - k), abs(effective_rank(lam) - k)]
    x = rng.standard_normal((40, 6)) * np.arange(1, 7)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))

    def d_eff(f):
        fc = f - f.mean(axis=0)
        return effective_dimension(eig_sym_psd(fc.T @ fc / len(f)))

    errs.append(abs(d_eff(x) - d_eff(x @ q)))
    worst = max(errs)
    return CheckResult("spectral identities", worst <= 1e-6, f"max err {worst:.2e}", time.perf_counter() - t0)


FAULTS = ("logdet-sign",)


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Temporarily break a known component so the suite can prove it notices."""
    if name is None:
        yield
        return
    if name != "logdet-sign":
        raise ValueError(f"unknown fault {name!r}; known: {FAULTS}")
    saved = ad._LOGDET_GRAD_SIGN
    ad._LOGDET_GRAD_SIGN = -saved
    try:
        yield
    finally:
        ad._LOGDET_GRAD_SIGN = saved


def run_all(n_instances: int = 20, fault: str | None = None) -> list[CheckResult]:
    with inject_fault(fault):
        results = check_loss_gradients(n_instances)
        results.append(check_layer_gradients())
        results += [
            check_eigensolver(),
            check_coding_rate_oracle(),
            check_map_oracle(),
            check_entropy_oracles(),
            check_spectral_identities(),
        ]
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
