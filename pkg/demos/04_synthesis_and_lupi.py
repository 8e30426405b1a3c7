"""End to end: select, synthesize feature labels, train under the combined
loss, and compare against the plain baseline.

Run: python3 demos/04_synthesis_and_lupi.py   (about a minute)
"""

import numpy as np

from drupi import coreset as C
from drupi import data as D
from drupi import distill as DI
from drupi import lupi as L
from drupi import models as M
from drupi import privileged as P

spec = M.ModelSpec(family="convnet", depth=2, width=32,
                   input_shape=(1, 16, 16), classes=3)
blob = D.BlobSpec(classes=3, per_class=40, size=(1, 16, 16),
                  sigma=0.05, class_sep=0.011)
train = D.make_blobs(blob, seed=0)
test = D.make_blobs(D.BlobSpec(classes=3, per_class=60, size=(1, 16, 16),
                               sigma=0.05, class_sep=0.011), seed=999)

# one real image per class
red = D.subset(train, C.select_random(train, ipc=1, seed=0))

# feature labels: weak-extractor init, refined by mean-embedding matching
weak = C.train_proxy(train, spec=spec, epochs=1, lr=0.05, seed=0)
red.feature_sets = P.init_features(red, "weak-model", seed=0, n_feat=1,
                                   weak_model=weak)
loss = P.DrupiLossConfig(lambda_reg=1.5, lambda_task=0.1)
cfg = DI.BiLevelConfig(model_spec=spec, loss=loss, outer_steps=3,
                       inner_steps=1, data_lr=0.5, batch_real=0, backend="dm")
red = DI.run_synthesis(train, red, cfg, seed=0)
print("synthesized feature labels:", red.feature_sets.shape,
      "provenance:", red.provenance["backend"])

seeds = range(3)
plain = [
    L.evaluate(L.train_lupi(red, spec, P.DrupiLossConfig(0.0, 0.0),
                            epochs=600, lr=0.03, seed=s), test)
    for s in seeds
]
enriched = [
    L.evaluate(L.train_lupi(red, spec, loss, epochs=600, lr=0.03, seed=s), test)
    for s in seeds
]
print(f"plain training      : {np.mean(plain):.3f}")
print(f"with feature labels : {np.mean(enriched):.3f}")

# gradient alignment diagnostic on a lightly trained probe
probe = C.train_proxy(train, spec=spec, epochs=5, lr=0.1, seed=0)
align = L.gradient_alignment(red, train, probe, loss)
print(f"gradient cosine vs real data: with PI {align['with_pi']:+.3f}, "
      f"without {align['without_pi']:+.3f}")
