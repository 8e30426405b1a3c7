"""Model zoo, synthetic blobs, and the reduced-dataset container.

Run: python3 demos/02_models_and_data.py
"""

import tempfile
from pathlib import Path

import numpy as np

from drupi import coreset as C
from drupi import data as D
from drupi import models as M

# Synthetic corpus: per-class templates plus gaussian pixel noise.
spec = D.BlobSpec(classes=3, per_class=20, size=(1, 16, 16), sigma=0.05)
train = D.make_blobs(spec, seed=0)
print("train:", train.images.shape, "classes:", train.classes)

# A small convnet with an explicit feature/classifier split.
mspec = M.ModelSpec(family="convnet", depth=2, width=32,
                    input_shape=(1, 16, 16), classes=3)
model = M.init_model(mspec, seed=0)
feats, logits = M.forward_split(model, train.images[:4], tap=2)
print("tap-2 features:", feats.shape, "logits:", logits.shape)
print("classifier sees features directly:",
      np.array_equal(M.classify_feature(model, feats), logits))

# Coreset selection baselines.
proxy = C.train_proxy(train, spec=mspec, epochs=5, lr=0.1, seed=0)
emb = C.extractor_features(train, proxy)
for name, idx in [
    ("random ", C.select_random(train, ipc=2, seed=0)),
    ("herding", C.select_herding(emb, train.labels, ipc=2)),
    ("kcenter", C.select_kcenter(emb, train.labels, ipc=2)),
    ("forget ", C.select_forgetting(train, ipc=2, epochs=6, seed=0, spec=mspec)),
]:
    print(f"{name} -> {sorted(idx.tolist())}")

# Reduced datasets ship as one container file with a JSON header and CRC.
red = D.subset(train, C.select_random(train, ipc=2, seed=0))
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "reduced.drpi"
    D.save_reduced(red, path)
    back = D.load_reduced(path)
    print("round trip bit-exact:",
          back.images.tobytes() == red.images.tobytes())
    print("header:", D.read_header(path)["channels"])
