"""Feature and code extraction plus the downstream evaluations.

Codes are stored packed, eight bits per byte, least significant bit first.
Hamming distances use per-byte population counts on the packed arrays.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ImageDataset
from .objective import binarize_targets

CODE_MAGIC = b"BITSCODE"
CODE_VERSION = 1
MAX_BLOCK_SIZE = 16


class UndefinedMAPError(ValueError):
    """No query has a relevant item in the database."""


class ProbeDivergenceError(FloatingPointError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray | None = None
    factors: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if np.isnan(self.features).any():
            raise ValueError("features contain NaN")
        n = len(self.features)
        for name in ("labels", "factors"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has length {len(v)}, expected {n}")

    @property
    def n(self) -> int:
        return len(self.features)


@dataclass
class BinaryCodeSet:
    packed: np.ndarray  # uint8 [n, B // 8]
    bits: int
    labels: np.ndarray | None = None
    factors: np.ndarray | None = None

    def __post_init__(self):
        if self.bits <= 0 or self.bits % 8:
            raise ValueError(f"number of bits must be a positive multiple of 8, got {self.bits}")
        self.packed = np.asarray(self.packed, dtype=np.uint8).reshape(-1, self.bits // 8)
        if self.labels is not None and len(self.labels) != self.n:
            raise ValueError("labels length does not match the number of codes")

    @property
    def n(self) -> int:
        return len(self.packed)

    @classmethod
    def from_bits(cls, bits, labels=None, factors=None) -> "BinaryCodeSet":
        bits = np.asarray(bits)
        return cls(pack_bits(bits), bits.shape[1], labels, factors)

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.packed, self.bits)


def pack_bits(bits) -> np.ndarray:
    """[n, B] array of 0/1 to [n, B/8] uint8; bit b lands in byte b // 8 at position b % 8."""
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] % 8:
        raise ValueError(f"expected [n, B] with B divisible by 8, got {bits.shape}")
    return np.packbits(bits.astype(bool), axis=1, bitorder="little")


def unpack_bits(packed, n_bits: int) -> np.ndarray:
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=1, count=n_bits, bitorder="little")


def write_codes(codes: BinaryCodeSet, path) -> None:
    path = os.fspath(path)
    parts = [CODE_MAGIC, struct.pack("<III", CODE_VERSION, codes.n, codes.bits), codes.packed.tobytes()]
    if codes.labels is not None:
        parts += [b"\x01", np.asarray(codes.labels, dtype="<u2").tobytes()]
    else:
        parts.append(b"\x00")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_codes(path) -> BinaryCodeSet:
    raw = Path(path).read_bytes()
    if raw[:8] != CODE_MAGIC:
        raise ValueError(f"{path}: not a BITSCODE file")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    version, n, b = struct.unpack_from("<III", raw, 8)
    if version != CODE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    end = 20 + n * b // 8
    if len(raw) < end + 1:
        raise ValueError(f"{path}: truncated code block")
    packed = np.frombuffer(raw, np.uint8, n * b // 8, 20).reshape(n, b // 8).copy()
    labels = None
    if raw[end] == 1:
        if len(raw) != end + 1 + 2 * n:
            raise ValueError(f"{path}: label block has the wrong length")
        labels = np.frombuffer(raw, "<u2", n, end + 1).astype(np.int64)
    elif len(raw) != end + 1:
        raise ValueError(f"{path}: unexpected trailing bytes")
    return BinaryCodeSet(packed, b, labels)


# --- extraction -------------------------------------------------------------


def _as_pair(source):
    from .model import ModelPair
    from .trainer import Checkpoint, load_checkpoint, restore

    if isinstance(source, ModelPair):
        return source
    if not isinstance(source, Checkpoint):
        source = load_checkpoint(source)
    return restore(source)[0]


def extract(source, dataset: ImageDataset, what: str = "features", branch: str = "teacher", batch_size: int = 256):
    """Backbone features or binary head codes on unaugmented images.

    ``source`` is a model pair, a loaded checkpoint, or a checkpoint path.
    """
    if what not in ("features", "codes"):
        raise ValueError(f"what must be 'features' or 'codes', got {what!r}")
    pair = _as_pair(source)
    if dataset.image_shape != tuple(pair.config.input_shape):
        raise ad.ShapeError(f"dataset images {dataset.image_shape} do not match model input {pair.config.input_shape}")
    feats, logits = [], []
    with ad.no_grad():
        for i in range(0, dataset.n, batch_size):
            h, a = pair.forward(branch, dataset.pixels[i : i + batch_size])
            feats.append(h.data)
            logits.append(a.data)
    factors = dataset.factors
    if what == "features":
        return FeatureSet(np.concatenate(feats).astype(np.float64), dataset.labels, factors)
    return BinaryCodeSet.from_bits(binarize_targets(np.concatenate(logits)), dataset.labels, factors)


# --- classification ---------------------------------------------------------


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + 1e-12)


def knn_predict(train: FeatureSet, queries: np.ndarray, k: int = 20, temp: float = 0.07) -> np.ndarray:
    if train.n == 0:
        raise ValueError("empty train set")
    if train.labels is None:
        raise ValueError("train labels are required")
    k = min(k, train.n)
    labels = np.asarray(train.labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    sim = _normalize(queries) @ _normalize(train.features).T
    # Stable sort: among equal similarities the lower train index wins a slot.
    top = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    w = np.exp(np.take_along_axis(sim, top, axis=1) / temp)
    votes = np.zeros((len(sim), n_classes))
    np.add.at(votes, (np.arange(len(sim))[:, None], labels[top]), w)
    return np.argmax(votes, axis=1)  # first maximum: smallest class id


def knn_classify(train: FeatureSet, test: FeatureSet, k: int = 20, temp: float = 0.07) -> float:
    """Weighted k-NN accuracy with cosine similarity and exp(sim / temp) votes."""
    if test.labels is None:
        raise ValueError("test labels are required")
    pred = knn_predict(train, test.features, k, temp)
    return float(np.mean(pred == np.asarray(test.labels)))


def linear_probe(
    train: FeatureSet,
    test: FeatureSet,
    epochs: int = 300,
    lr: float = 0.5,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> float:
    """Softmax regression on standardized frozen features, full-batch gradient descent.

    Weights start at zero and the bias at the log class prior, so a zero-epoch
    probe predicts the most frequent training class. Training is deterministic;
    ``seed`` is accepted for interface symmetry and does not affect the result.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("labels are required")
    y = np.asarray(train.labels, dtype=np.int64)
    n_classes = int(max(y.max(), np.max(test.labels))) + 1
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0) + 1e-8
    x = (train.features - mu) / sd
    xt = (test.features - mu) / sd
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    w = np.zeros((x.shape[1], n_classes))
    b = np.log(np.maximum(counts, 1e-12) / counts.sum())
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(len(y)), y] + 1e-300))
        if not np.isfinite(loss):
            raise ProbeDivergenceError("linear probe loss is not finite")
        g = (p - onehot) / len(y)
        w -= lr * (x.T @ g + weight_decay * w)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(xt @ w + b, axis=1)
    return float(np.mean(pred == np.asarray(test.labels)))


# --- retrieval --------------------------------------------------------------


def hamming_distances(queries: np.ndarray, db: np.ndarray) -> np.ndarray:
    """[q, n] Hamming distances between packed code arrays."""
    out = np.empty((len(queries), len(db)), dtype=np.int64)
    for i, qrow in enumerate(queries):
        out[i] = np.bitwise_count(np.bitwise_xor(db, qrow)).sum(axis=1)
    return out


def _average_precision(order: np.ndarray, labels: np.ndarray, q: int) -> float | None:
    order = order[order != q]
    rel = labels[order] == labels[q]
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        return None
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def retrieval_map(db, metric: str = "cosine", chunk: int = 256) -> float:
    """mAP@ALL: every sample queries all others; relevance means equal labels.

    Ties in distance are broken by ascending database index.
    """
    if db.labels is None:
        raise ValueError("labels are required")
    labels = np.asarray(db.labels)
    if db.n < 2:
        raise ValueError("need at least 2 samples")
    if metric == "hamming":
        if not isinstance(db, BinaryCodeSet):
            raise ValueError("hamming metric needs binary codes")
        data = db.packed
    elif metric == "cosine":
        if isinstance(db, BinaryCodeSet):
            # +-1 codes share one norm, so the raw integer dot product ranks like cosine with exact ties
            data = db.unpack() * 2.0 - 1.0
        else:
            data = _normalize(db.features)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    aps = []
    for start in range(0, db.n, chunk):
        stop = min(start + chunk, db.n)
        if metric == "hamming":
            dist = hamming_distances(data[start:stop], data)
        else:
            dist = -(data[start:stop] @ data.T)
        orders = np.argsort(dist, axis=1, kind="stable")
        for row, q in enumerate(range(start, stop)):
            ap = _average_precision(orders[row], labels, q)
            if ap is not None:
                aps.append(ap)
    if not aps:
        raise UndefinedMAPError("no query has a relevant item; mAP is undefined")
    return float(np.mean(aps))


# --- code statistics --------------------------------------------------------


def subsample_indices(n_bits: int, m: int, seed: int) -> np.ndarray:
    if m % 8 or m <= 0:
        raise ValueError(f"subsample size must be a positive multiple of 8, got {m}")
    if m > n_bits:
        raise ValueError(f"cannot keep {m} of {n_bits} bits")
    return np.sort(np.random.default_rng(seed).choice(n_bits, size=m, replace=False))


def subsample_bits(codes: BinaryCodeSet, m: int, seed: int = 0) -> BinaryCodeSet:
    """Keep a seeded uniform random subset of m bits, in their original order."""
    idx = subsample_indices(codes.bits, m, seed)
    return BinaryCodeSet.from_bits(codes.unpack()[:, idx], codes.labels, codes.factors)


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms


@dataclass
class EntropyReport:
    marginal: np.ndarray
    marginal_mean: float
    block: np.ndarray
    block_mean: float
    block_size: int

    def as_dict(self) -> dict:
        return {
            "marginal_mean": self.marginal_mean,
            "block_mean": self.block_mean,
            "block_size": self.block_size,
            "marginal": self.marginal.tolist(),
            "block": self.block.tolist(),
        }


def code_entropy(codes: BinaryCodeSet, block_size: int = 8) -> EntropyReport:
    """Plug-in marginal entropy per bit and joint entropy of contiguous bit blocks."""
    if block_size < 1 or block_size > MAX_BLOCK_SIZE:
        raise ValueError(f"block_size must be in [1, {MAX_BLOCK_SIZE}], got {block_size}")
    if codes.bits % block_size:
        raise ValueError(f"block_size {block_size} does not divide {codes.bits}")
    if codes.n < 1:
        raise ValueError("need at least one code")
    bits = codes.unpack().astype(np.int64)
    p = bits.mean(axis=0)
    marginal = _entropy_bits(p) + _entropy_bits(1 - p)
    weights = 1 << np.arange(block_size)
    values = bits.reshape(codes.n, -1, block_size) @ weights
    block = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        freq = np.bincount(values[:, j], minlength=1 << block_size) / codes.n
        block[j] = _entropy_bits(freq).sum()
    return EntropyReport(marginal, float(marginal.mean()), block, float(block.mean()), block_size)


def bit_condition_report(codes: BinaryCodeSet, labels, bit_index: int) -> dict[int, dict]:
    """For each class: sample ids with the bit off, ids with it on, and the on-rate."""
    if not 0 <= bit_index < codes.bits:
        raise IndexError(f"bit_index {bit_index} out of range for {codes.bits} bits")
    if labels is None:
        raise ValueError("labels are required")
    labels = np.asarray(labels)
    bit = codes.unpack()[:, bit_index].astype(bool)
    report = {}
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        on = ids[bit[ids]]
        report[int(c)] = {
            "off": ids[~bit[ids]].tolist(),
            "on": on.tolist(),
            "rate": len(on) / len(ids),
        }
    return report


def mutual_information(x, y) -> float:
    """Plug-in mutual information in bits between two discrete sequences."""
    _, xi = np.unique(np.asarray(x), return_inverse=True)
    _, yi = np.unique(np.asarray(y), return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= joint.sum()
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    mask = joint > 0
    outer = np.outer(px, py)
    return float(max(np.sum(joint[mask] * np.log2(joint[mask] / outer[mask])), 0.0))


def factor_bit_mutual_information(codes: BinaryCodeSet, factors) -> np.ndarray:
    """[B, F] matrix of plug-in MI (bits) between every bit and every factor."""
    if factors is None:
        raise ValueError("factors are required")
    factors = np.asarray(factors)
    if factors.ndim == 1:
        factors = factors[:, None]
    bits = codes.unpack()
    out = np.zeros((codes.bits, factors.shape[1]))
    for f in range(factors.shape[1]):
        _, fi = np.unique(factors[:, f], return_inverse=True)
        k = fi.max() + 1
        # joint counts for all bits at once: [B, 2, k]
        joint = np.zeros((codes.bits, 2, k))
        for v in range(k):
            sel = bits[fi == v]
            on = sel.sum(axis=0)
            joint[:, 1, v] = on
            joint[:, 0, v] = len(sel) - on
        joint /= codes.n
        pb = joint.sum(axis=2, keepdims=True)
        pf = joint.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(joint > 0, joint * np.log2(joint / (pb * pf)), 0.0)
        out[:, f] = np.maximum(terms.sum(axis=(1, 2)), 0.0)
    return out
