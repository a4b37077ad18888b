"""
Train on the synthetic factor images and inspect the learned codes
==================================================================

A short run of the small convolutional backbone on shape/color images with
an independent corner glyph. Afterwards the teacher's bits on fresh images
are scored for entropy, retrieval under bit subsampling, and how much each
bit says about the glyph.

Pass the number of epochs as the first argument (default 5; the acceptance
run uses 20).
"""

import sys

import numpy as np

from bits.codes import code_entropy, extract, factor_bit_mutual_information, retrieval_map, subsample_bits
from bits.data import SyntheticFactorSpec, generate_synthetic
from bits.model import ModelConfig
from bits.spectral import spectrum_summary
from bits.trainer import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

train_set = generate_synthetic(SyntheticFactorSpec(), seed=0)
fresh = generate_synthetic(SyntheticFactorSpec(samples_per_combination=2), seed=1)
print(f"{train_set.n} training images, {fresh.n} fresh images")

cfg = TrainConfig(
    epochs=epochs,
    beta=0.1,
    eps=0.1,
    m_start=0.9,
    reset_period=0,
    bit_normalization="sum-over-bits",
    model=ModelConfig(backbone_dim=128, head_out=64, head_init_std=None, head_last_scale=1.0),
)
result = train(cfg, train_set)
last = result.metrics[-1]
print(f"last step: bce {last['bce']:.3f}  rate term (-R) {last['rate']:.3f}  agreement {last['agreement_rate']:.3f}")

teacher = extract(result.pair, fresh, "codes", "teacher")
student = extract(result.pair, fresh, "codes", "student")
print(f"teacher/student bit agreement on fresh images: {np.mean(teacher.unpack() == student.unpack()):.3f}")

ent = code_entropy(teacher, block_size=8)
print(f"mean bit entropy {ent.marginal_mean:.3f}, mean 8-bit block entropy {ent.block_mean:.2f}")

for m in (64, 32, 16, 8):
    print(f"  {m:>2} bits: Hamming mAP {retrieval_map(subsample_bits(teacher, m, seed=0), 'hamming'):.3f}")

mi = factor_bit_mutual_information(teacher, fresh.factors)
for j, name in enumerate(fresh.factor_names):
    print(f"  most informative bit for {name}: bit {mi[:, j].argmax()} ({mi[:, j].max():.3f} bits)")

features = extract(result.pair, fresh, "features", "teacher")
s = spectrum_summary(features.features)
print(f"backbone spectrum: d_eff {s.d_eff:.1f}, r_eff {s.r_eff:.1f} of {s.dim}")
