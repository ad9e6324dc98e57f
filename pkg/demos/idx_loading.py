"""Round-trip the IDX binary format and build an open-set split from it.

Real MNIST files work the same way: pass their paths to load_idx (.gz is fine).
Run from the repository root:  python3 demos/idx_loading.py
"""
import tempfile
from pathlib import Path

import numpy as np

from osslab.data import FormatError, SplitConfig, load_idx, split_open_set, write_idx_images, write_idx_labels

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
labels = rng.integers(0, 10, 2000).astype(np.uint8)
images = rng.integers(0, 256, (2000, 28, 28)).astype(np.uint8)
write_idx_images(tmp / "images", images)
write_idx_labels(tmp / "labels", labels)

# Digits 0-5 become classes 0-5; digits 6-9 all collapse to the OOD label 6.
ds = load_idx(tmp / "images", tmp / "labels", id_classes=range(6))
print("features", ds.features.shape, ds.features.dtype, "range", ds.features.min(), ds.features.max())
print("label counts", np.bincount(ds.labels))

labeled, unlabeled, test = split_open_set(ds, SplitConfig(6, 10, 1000, 0.3, seed=0))
print("labeled", len(labeled), "unlabeled", len(unlabeled), "OOD in unlabeled", int(unlabeled.is_ood.sum()))

# A corrupted header is rejected rather than silently misread.
raw = bytearray((tmp / "images").read_bytes())
raw[2] = 0x09
(tmp / "bad").write_bytes(bytes(raw))
try:
    load_idx(tmp / "bad", tmp / "labels")
except FormatError as err:
    print("rejected:", err)
