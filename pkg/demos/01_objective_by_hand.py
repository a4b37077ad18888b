"""
The binary agreement objective on a toy batch
=============================================

Builds a tiny batch of logits, turns the teacher side into hard bits, and
walks through the two loss terms: per-bit cross-entropy against those bits
and the coding rate of the normalized logits. Finishes with a finite
difference check of the combined gradient.
"""

import numpy as np

from bits import autodiff as ad
from bits.objective import AgreementConfig, binarize_targets, coding_rate, loss_from_logits

rng = np.random.default_rng(0)

# Two global views of 6 images, 16 bits each.
teacher = [rng.standard_normal((6, 16)) for _ in range(2)]
student = [ad.Tensor(t + 0.3 * rng.standard_normal(t.shape), requires_grad=True) for t in teacher]

bits = binarize_targets(teacher[0])
print("teacher bits, first image:", bits[0])

cfg = AgreementConfig(beta=0.1, eps=0.5)
loss, parts = loss_from_logits(student, teacher, cfg, n_global=2)
print(f"bce {parts.bce:.4f}  rate term (-R) {parts.rate:.4f}  total {parts.total:.4f}")
# Pairs never match a view with itself, so agreement compares across crops.
print(f"cross-view bit agreement {parts.agreement_rate:.3f}")

# A collapsed batch has no spread at all, so its coding rate is exactly zero.
same = ad.Tensor(np.tile(teacher[0][:1], (6, 1)))
print("rate of a collapsed batch:", float(coding_rate([same], 0.5).data))

# Gradient of the combined loss against central differences.
def total(a, b):
    return loss_from_logits([a, b], teacher, cfg, n_global=2)[0]

rep = ad.gradcheck(total, [s.data for s in student])
print(f"gradcheck max relative error {rep.max_rel_err:.2e} over {rep.num_elements_checked} entries")
