"""
Agreement-weighted detection loss
=================================

Each anchor's loss term is scaled by the confidence of the fused box it was
matched to. Boxes that only one annotator drew pull on the detector less
than boxes everyone agreed on.
"""

import numpy as np

from annofuse import FusedBox, LossConfig, encode_targets, loss_eq1, loss_eq2
from annofuse.geometry import Box
from annofuse.loss import Prediction

# Two fused boxes: one unanimous (c=1), one drawn by a single annotator.
fused = [
    FusedBox(Box(4, 4, 20, 20), 0, 1.0, 3, ("a1", "a2", "a3")),
    FusedBox(Box(36, 36, 52, 52), 1, 1 / 3, 1, ("a2",)),
]
anchors = np.array([[4, 4, 20, 20], [36, 36, 52, 52], [20, 40, 32, 52]], dtype=float)
targets = encode_targets(anchors, fused, LossConfig(eta=0.5))
print("matched:", targets.matched, " weights:", targets.weight)

# An untrained detector: uniform class scores and zero offsets.
pred = Prediction(np.zeros((3, 3)), np.zeros((3, 4)))
cfg = LossConfig()
plain = loss_eq1(pred, targets, cfg)
weighted = loss_eq2(pred, targets, cfg)
print("per-anchor, unweighted:", np.round(plain.per_anchor, 4))
print("per-anchor, weighted:  ", np.round(weighted.per_anchor, 4))

# With every confidence at 1 the two losses coincide exactly.
targets.weight[:] = 1.0
print("identical at c=1:", loss_eq1(pred, targets, cfg).total == loss_eq2(pred, targets, cfg).total)
