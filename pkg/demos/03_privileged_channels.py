"""Feature, attention, and soft labels plus the combined loss.

Run: python3 demos/03_privileged_channels.py
"""

import numpy as np

from drupi import coreset as C
from drupi import data as D
from drupi import models as M
from drupi import privileged as P

spec = M.ModelSpec(family="convnet", depth=2, width=32,
                   input_shape=(1, 16, 16), classes=3)
train = D.make_blobs(D.BlobSpec(classes=3, per_class=20), seed=0)
red = D.subset(train, C.select_random(train, ipc=2, seed=0))

# Direct assignment: features of the reduced images under an extractor.
weak = C.train_proxy(train, spec=spec, epochs=1, lr=0.05, seed=0)
red.feature_sets = P.assign_features(red, weak)
print("feature labels:", red.feature_sets.shape)

# Attention labels are the pooled (cheaper) form of the same information.
f = red.feature_sets[0, 0]
print("channel attention:", P.pool_attention(f, "channel").shape)
print("spatial attention:", P.pool_attention(f, "spatial").shape)

# Soft labels from a stronger teacher, tempered.
teacher = C.train_proxy(train, spec=spec, epochs=40, lr=0.2, seed=0)
red.soft_labels = P.soft_labels(red, teacher, temperature=4.0)
print("soft label rows sum to", red.soft_labels.sum(axis=1)[:3])

# The combined loss reports each weighted component; they sum to the total.
cfg = P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1, lambda_soft=0.001)
total, comps = P.drupi_loss(weak, red, cfg)
print("loss components:", {k: round(v, 4) for k, v in comps.items()})
print("additive:", abs(total - sum(comps.values())) < 1e-6)

# Diversity vs discriminability of the stored labels.
div, disc = P.diversity_discriminability(red.feature_sets, red.labels, seed=0)
print(f"diversity {div:+.3f}  discriminability {disc:.3f}")
