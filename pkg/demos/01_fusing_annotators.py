"""
Fusing boxes from several annotators
====================================

Three simulated annotators label the same synthetic scene. Weighted boxes
fusion turns their boxes into one consensus set, and each fused box carries a
confidence that says how many annotators agreed on it.
"""

import numpy as np

from annofuse import WbfConfig, build_corpus, fuse_dataset, iou
from annofuse.render import BoxSet, render_svg

# A small corpus: 64x64 images, two classes, three annotators whose
# coordinate jitter grows from 1.5 to 3.5 pixels.
corpus = build_corpus(8, rng_seed=3)
ds = corpus.dataset
image_id = ds.images[0].image_id
print("annotators:", ds.annotators)

# What each annotator drew on the first image.
for ann, boxes in ds.by_annotator(image_id).items():
    print(ann, [tuple(round(v, 1) for v in b.box.as_tuple()) for b in boxes])

# Fuse. A looser IoU threshold keeps one object's jittered boxes together.
fused = fuse_dataset(ds, WbfConfig(iou_threshold=0.4))
for f in fused.fused[image_id]:
    best = max((iou(f.box, t.box) for t in corpus.truth[image_id]), default=0.0)
    print(f"class {f.class_id}  c={f.confidence:.2f}  support={f.support}  IoU with truth {best:.2f}")

# Confidence over the whole corpus, binned as one, two or three supporting
# annotators. Jitter splits some objects into partial clusters, and spurious
# boxes land in the lowest bin.
conf = np.array([f.confidence for fs in fused.fused.values() for f in fs])
print("confidence histogram:", np.histogram(conf, bins=[0, 0.34, 0.67, 1.01])[0])

# Overlay everything for a visual check.
sets = [BoxSet(a, b, ds.classes) for a, b in ds.by_annotator(image_id).items()]
sets.append(BoxSet("fused", [f.as_labeled() for f in fused.fused[image_id]], ds.classes))
with open("fused_overlay.svg", "w") as fh:
    fh.write(render_svg(corpus.pixels[image_id], sets))
print("wrote fused_overlay.svg")
