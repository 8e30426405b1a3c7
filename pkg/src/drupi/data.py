"""Dataset ingestion, synthetic corpora, and reduced-dataset serialization.

The reduced dataset travels as one container file: `DRPI` magic, u16
version, u32 header length, UTF-8 JSON header (shapes, channels present,
provenance), raw little-endian float32 payloads in header order, and a
trailing CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"DRPI"
VERSION = 1

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray   # N x Ch x H x W float32 in [0, 1]
    labels: np.ndarray   # N int64 in [0, C)

    def validate(self, training: bool = True) -> "LabeledDataset":
        if self.images.ndim != 4:
            raise DataError(f"images must be N x Ch x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError("images and labels disagree in length")
        if len(self.images) < 1:
            raise DataError("dataset is empty")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError("images not scaled to [0, 1]")
        c = int(self.labels.max()) + 1
        if training:
            counts = np.bincount(self.labels, minlength=c)
            if (counts == 0).any():
                raise DataError(f"classes without examples: {np.where(counts == 0)[0]}")
        return self

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class ReducedDataset:
    images: np.ndarray                      # M x Ch x H x W
    labels: np.ndarray                      # M
    soft_labels: np.ndarray | None = None   # M x C, rows sum to 1
    feature_sets: np.ndarray | None = None  # M x n_feat x feature-shape
    attention_labels: np.ndarray | None = None  # M x pooled-shape
    attention_kind: str | None = None       # "spatial" | "channel"
    provenance: dict = field(default_factory=dict)

    @property
    def n_feat(self) -> int:
        return 0 if self.feature_sets is None else self.feature_sets.shape[1]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def validate(self) -> "ReducedDataset":
        m = len(self.images)
        if len(self.labels) != m:
            raise DataError("labels length disagrees with images")
        if self.images.ndim != 4:
            raise DataError(f"images must be M x Ch x H x W, got {self.images.shape}")
        for name in ("images", "soft_labels", "feature_sets", "attention_labels"):
            a = getattr(self, name)
            if a is not None and not np.isfinite(a).all():
                raise DataError(f"{name} contains non-finite entries")
        if self.soft_labels is not None:
            if self.soft_labels.shape[0] != m:
                raise DataError("soft_labels rows disagree with images")
            rows = self.soft_labels.sum(axis=1)
            if np.abs(rows - 1.0).max() > 1e-5:
                raise DataError("soft-label rows do not sum to 1 within 1e-5")
        if self.feature_sets is not None:
            if self.feature_sets.shape[0] != m:
                raise DataError("feature_sets rows disagree with images")
            if self.feature_sets.ndim < 3 or self.feature_sets.shape[1] < 1:
                raise DataError("feature_sets must be M x n_feat x feature-shape, n_feat >= 1")
        if self.attention_labels is not None:
            if self.attention_labels.shape[0] != m:
                raise DataError("attention_labels rows disagree with images")
            if self.attention_kind not in ("spatial", "channel"):
                raise DataError("attention_kind must be 'spatial' or 'channel'")
        return self

    def take(self, idx) -> "ReducedDataset":
        """Row-subset view across every present channel."""
        pick = lambda a: None if a is None else a[idx]
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            soft_labels=pick(self.soft_labels),
            feature_sets=pick(self.feature_sets),
            attention_labels=pick(self.attention_labels),
        )

    def copy(self) -> "ReducedDataset":
        cp = lambda a: None if a is None else a.copy()
        return replace(
            self,
            images=self.images.copy(),
            labels=self.labels.copy(),
            soft_labels=cp(self.soft_labels),
            feature_sets=cp(self.feature_sets),
            attention_labels=cp(self.attention_labels),
            provenance=dict(self.provenance),
        )


@dataclass(frozen=True)
class BlobSpec:
    classes: int = 3
    per_class: int = 40
    size: tuple = (1, 16, 16)
    template_seed: int = 7
    sigma: float = 0.05
    class_sep: float = 0.013   # template offset scale; controls task hardness
    smoothness: float = 1.5    # gaussian blur of the class patterns

    def validate(self) -> "BlobSpec":
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.sigma < 0:
            raise DataError("sigma must be >= 0")
        if self.per_class < 1:
            raise DataError("per_class must be >= 1")
        return self


def blob_templates(spec: BlobSpec) -> np.ndarray:
    """Per-class templates: smooth mid-range base + unit-RMS class pattern.

    Smoothing keeps the class signal low-frequency, where a pooled convnet
    can integrate it; the offset scale sets how much a single noisy example
    reveals about its class.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(spec.template_seed)
    sm = (0, spec.smoothness, spec.smoothness)
    base = rng.uniform(0.35, 0.65, size=spec.size)
    if spec.smoothness > 0:
        base = gaussian_filter(base, sm)
    out = np.empty((spec.classes,) + tuple(spec.size), dtype=np.float32)
    for c in range(spec.classes):
        pat = rng.normal(size=spec.size)
        if spec.smoothness > 0:
            pat = gaussian_filter(pat, sm)
        pat /= np.sqrt((pat ** 2).mean())
        out[c] = np.clip(base + spec.class_sep * pat, 0.0, 1.0)
    return out


def make_blobs(spec: BlobSpec, seed: int = 0) -> LabeledDataset:
    """Gaussian blobs around fixed class templates; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    templates = blob_templates(spec)
    n = spec.classes * spec.per_class
    images = np.empty((n,) + tuple(spec.size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for c in range(spec.classes):
        sl = slice(c * spec.per_class, (c + 1) * spec.per_class)
        noise = rng.normal(scale=spec.sigma, size=(spec.per_class,) + tuple(spec.size))
        images[sl] = np.clip(templates[c] + noise, 0.0, 1.0)
        labels[sl] = c
    return LabeledDataset(images=images, labels=labels).validate()


def subset(ds: LabeledDataset, indices: np.ndarray, provenance: dict | None = None) -> ReducedDataset:
    idx = np.asarray(indices)
    return ReducedDataset(
        images=ds.images[idx].copy(),
        labels=ds.labels[idx].copy(),
        provenance=provenance or {},
    ).validate()


def ipc_from_fraction(ds: LabeledDataset, fraction: float) -> int:
    """floor(fraction * N / C); fraction-based sizes collapse to a per-class count."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    ipc = int(fraction * len(ds.images)) // ds.classes
    return max(ipc, 1)


# --- IDX ---------------------------------------------------------------------

def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"truncated {what} at byte offset {f.tell() - len(b)}: "
                        f"wanted {n} bytes, got {len(b)}")
    return b


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, bytes scaled by 1/255)."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x} at byte offset 0")
        raw = _read_exact(f, n * rows * cols, "image payload")
    images = (
        np.frombuffer(raw, dtype=np.uint8)
        .reshape(n, 1, rows, cols)
        .astype(np.float32)
        / 255.0
    )
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x} at byte offset 0")
        lraw = _read_exact(f, nl, "label payload")
    if nl != n:
        raise DataError(f"image count {n} != label count {nl}")
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(images=images, labels=labels)


# --- container serialization --------------------------------------------------

_CHANNELS = ("images", "labels", "soft_labels", "feature_sets", "attention_labels")


def save_reduced(ds: ReducedDataset, path) -> None:
    ds.validate()
    header = {
        "version": VERSION,
        "channels": [],
        "shapes": {},
        "attention_kind": ds.attention_kind,
        "n_feat": ds.n_feat,
        "provenance": ds.provenance,
    }
    payload = bytearray()
    for name in _CHANNELS:
        a = getattr(ds, name)
        if a is None:
            continue
        a32 = np.ascontiguousarray(a, dtype=np.float32)
        header["channels"].append(name)
        header["shapes"][name] = list(a32.shape)
        payload += a32.astype("<f4", copy=False).tobytes()
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(hjson)))
        f.write(hjson)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def load_reduced(path) -> ReducedDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"bad container magic {blob[:4]!r}")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise DataError(f"container version {version} != supported {VERSION}")
    try:
        header = json.loads(blob[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable container header: {e}") from e
    expected = sum(
        4 * int(np.prod(header["shapes"][name])) for name in header["channels"]
    )
    body = blob[10 + hlen :]
    if len(body) != expected + 4:
        raise DataError(
            f"payload size mismatch: expected {expected} + 4 CRC bytes, got {len(body)}"
        )
    payload, (crc_stored,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DataError("payload CRC32 mismatch")

    arrays, off = {}, 0
    for name in header["channels"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .astype(np.float32)
        )
        off += 4 * count

    if "images" not in arrays or "labels" not in arrays:
        raise DataError("container missing images or labels channel")
    fs = arrays.get("feature_sets")
    if header.get("n_feat", 0) != (0 if fs is None else fs.shape[1]):
        raise DataError(
            f"header n_feat {header.get('n_feat')} disagrees with payload "
            f"{0 if fs is None else fs.shape[1]}"
        )
    ds = ReducedDataset(
        images=arrays["images"],
        labels=arrays["labels"].astype(np.int64),
        soft_labels=arrays.get("soft_labels"),
        feature_sets=fs,
        attention_labels=arrays.get("attention_labels"),
        attention_kind=header.get("attention_kind"),
        provenance=header.get("provenance", {}),
    )
    return ds.validate()


def read_header(path) -> dict:
    """Parse only the JSON header of a container file."""
    with open(path, "rb") as f:
        head = f.read(10)
        if head[:4] != MAGIC:
            raise DataError(f"bad container magic {head[:4]!r}")
        version, hlen = struct.unpack("<HI", head[4:])
        return json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
