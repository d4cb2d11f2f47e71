"""Dataset ingestion, synthetic fixtures, and dataset persistence.

Images are float32 H x W x C arrays in [0, 1]. Labels are multi-hot uint8
vectors of length beta with at least one active class. Both invariants are
enforced on every ingestion path.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

CIFAR_SHAPE = (32, 32, 3)
_CIFAR_RECORD = 3073  # 1 label byte + 3072 pixel bytes
_CIFAR_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_BATCH = "test_batch.bin"


def one_hot(cls, beta):
    """Single-class indicator vector."""
    if not 0 <= cls < beta:
        raise InputError(f"class {cls} out of range for beta={beta}")
    v = np.zeros(beta, dtype=np.uint8)
    v[cls] = 1
    return v


def check_label(label, beta=None):
    label = np.asarray(label, dtype=np.uint8)
    if label.ndim != 1 or (beta is not None and label.shape[0] != beta):
        raise InputError(f"label shape {label.shape} invalid for beta={beta}")
    if int(label.sum()) == 0:
        raise InputError("label vector has no active class")
    return label


def check_image(image, shape=None):
    image = np.asarray(image, dtype=np.float32)
    if shape is not None and image.shape != tuple(shape):
        raise InputError(f"image shape {image.shape}, expected {tuple(shape)}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InputError("pixel values outside [0, 1]")
    return image


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x C float32 in [0, 1]
    label: np.ndarray  # beta-length uint8 multi-hot


@dataclass
class DatasetHandle:
    """Immutable-by-convention ordered collection of samples."""

    samples: list
    split: str  # train | test | query
    beta: int
    shape: tuple
    fingerprint: str = field(default="")

    def __post_init__(self):
        ids = set()
        for s in self.samples:
            s.image = check_image(s.image, self.shape)
            s.label = check_label(s.label, self.beta)
            if s.id in ids:
                raise InputError(f"duplicate sample id {s.id!r}")
            ids.add(s.id)
        if not self.fingerprint:
            self.fingerprint = self._compute_fingerprint()

    def _compute_fingerprint(self):
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.id.encode())
            h.update(s.image.tobytes())
            h.update(s.label.tobytes())
        return h.hexdigest()

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def images(self):
        return np.stack([s.image for s in self.samples]) if self.samples else \
            np.zeros((0,) + tuple(self.shape), dtype=np.float32)

    def labels(self):
        return np.stack([s.label for s in self.samples]) if self.samples else \
            np.zeros((0, self.beta), dtype=np.uint8)

    def ids(self):
        return [s.id for s in self.samples]

    def by_id(self, sample_id):
        if not hasattr(self, "_index"):
            self._index = {s.id: s for s in self.samples}
        try:
            return self._index[sample_id]
        except KeyError:
            raise InputError(f"unknown sample id {sample_id!r}")

    def ids_with_label(self, y_t):
        """Ids whose label bitset is a superset of y_t's active bits."""
        y_t = check_label(y_t, self.beta)
        active = y_t.astype(bool)
        return [s.id for s in self.samples if np.all(s.label.astype(bool)[active])]


def load_cifar10(path):
    """Load the CIFAR-10 binary batch archive into (train, test) handles."""
    trains = []
    for name in _CIFAR_TRAIN_BATCHES:
        trains.append(_read_cifar_batch(os.path.join(path, name), name))
    test = _read_cifar_batch(os.path.join(path, _CIFAR_TEST_BATCH), _CIFAR_TEST_BATCH)

    def build(parts, split):
        samples = []
        for name, labels, pixels in parts:
            for i in range(labels.shape[0]):
                img = pixels[i].reshape(3, 32, 32).transpose(1, 2, 0)
                samples.append(Sample(
                    id=f"{name[:-4]}:{i}",
                    image=img.astype(np.float32) / 255.0,
                    label=one_hot(int(labels[i]), 10),
                ))
        return DatasetHandle(samples, split=split, beta=10, shape=CIFAR_SHAPE)

    return build(trains, "train"), build([test], "test")


def _read_cifar_batch(path, name):
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise FormatError(f"cannot read CIFAR batch {name}: {e}")
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise FormatError(f"CIFAR batch {name} truncated: {raw.size} bytes")
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0]
    if labels.max(initial=0) > 9:
        raise FormatError(f"CIFAR batch {name} has label byte > 9")
    return name, labels, records[:, 1:]


def load_image_folder(path, label_manifest, shape=CIFAR_SHAPE, split="train"):
    """Load images from a folder with a CSV manifest of hex-packed labels.

    Manifest format: header "file,beta,bits", one row per image, bits a hex
    string packing the multi-hot label row (bit 0 = class 0).
    """
    from PIL import Image

    with open(label_manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["file", "beta", "bits"]:
            raise FormatError(f"manifest header {header!r}, expected file,beta,bits")
        rows = list(reader)
    if not rows:
        raise FormatError("empty label manifest")

    beta = int(rows[0][1])
    samples, errors = [], []
    for fname, row_beta, bits in rows:
        if int(row_beta) != beta:
            raise FormatError(f"inconsistent beta in manifest row {fname!r}")
        label = _unpack_hex_label(bits, beta)
        if int(label.sum()) == 0:
            raise FormatError(f"manifest row {fname!r} has zero active labels")
        try:
            with Image.open(os.path.join(path, fname)) as im:
                im = im.convert("RGB").resize((shape[1], shape[0]), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except OSError as e:
            errors.append((fname, str(e)))
            continue
        if shape[2] == 1:
            arr = arr.mean(axis=2, keepdims=True)
        samples.append(Sample(id=fname, image=arr, label=label))
    if errors:
        raise FormatError(f"undecodable images: {errors}")
    return DatasetHandle(samples, split=split, beta=beta, shape=shape)


def _unpack_hex_label(bits, beta):
    packed = bytes.fromhex(bits)
    unpacked = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="little")
    if unpacked.size < beta:
        raise FormatError(f"hex label too short for beta={beta}")
    return unpacked[:beta].astype(np.uint8)


def _pack_hex_label(label):
    return np.packbits(label.astype(np.uint8), bitorder="little").tobytes().hex()


def synth_dataset(classes, per_class, shape=CIFAR_SHAPE, seed=0, test_per_class=None,
                  noise=0.12, contrast=0.5, background=(0.25, 0.75),
                  instance_weight=1.0, texture=0.0):
    """Class-conditional blob images for fast, separable desk-scale runs.

    Each class gets a smooth random spatial pattern; samples add per-pixel
    noise and, when texture > 0, a smooth per-image random field that gives
    local windows natural-image-like variance. Returns (train, test).
    """
    if classes < 2:
        raise InputError("need at least 2 classes")
    if test_per_class is None:
        test_per_class = max(per_class // 5, 2)
    rng = np.random.default_rng(seed)
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w]

    patterns = []
    for _ in range(classes):
        # zero-mean spatial signature: three soft blobs with random tints
        pat = np.zeros(shape)
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
            radius = rng.uniform(0.15, 0.3) * min(h, w)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            tint = rng.uniform(-contrast, contrast, size=c)
            pat = pat + bump[:, :, None] * tint[None, None, :]
        patterns.append(pat - pat.mean())

    def instance_blobs():
        # low-frequency per-sample structure: gives each image an identity
        # that a network can memorize, unlike iid pixel noise
        pat = np.zeros(shape)
        for _ in range(2):
            cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
            radius = rng.uniform(0.1, 0.25) * min(h, w)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            tint = rng.uniform(-contrast, contrast, size=c) * instance_weight
            pat = pat + bump[:, :, None] * tint[None, None, :]
        return pat

    def texture_field():
        # smooth low-frequency field, bilinearly upsampled from a coarse grid
        if texture == 0.0:
            return 0.0
        from scipy.ndimage import zoom

        grid = rng.normal(0.0, texture, size=(4, 4, c))
        field = zoom(grid, (h / 4, w / 4, 1), order=1, grid_mode=True,
                     mode="nearest")
        return field

    def make(count, split, tag):
        samples = []
        for cls in range(classes):
            for i in range(count):
                # per-sample background keeps parameter gradients diverse
                bg = rng.uniform(background[0], background[1], size=(1, 1, c))
                grain = rng.normal(0.0, noise, size=shape)
                img = np.clip(bg + patterns[cls] + instance_blobs()
                              + texture_field() + grain,
                              0.0, 1.0).astype(np.float32)
                samples.append(Sample(
                    id=f"{tag}:{cls}:{i}", image=img, label=one_hot(cls, classes)))
        return DatasetHandle(samples, split=split, beta=classes, shape=shape)

    return make(per_class, "train", "syn-train"), make(test_per_class, "test", "syn-test")


def save_dataset(handle, path):
    """Persist a handle as manifest.json + float32 image blob + label rows."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "split": handle.split,
        "beta": handle.beta,
        "shape": list(handle.shape),
        "fingerprint": handle.fingerprint,
        "ids": handle.ids(),
        "labels": [_pack_hex_label(s.label) for s in handle.samples],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    blob = handle.images().astype("<f4").tobytes()
    with open(os.path.join(path, "images.bin"), "wb") as fh:
        fh.write(blob)


def load_dataset(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    shape = tuple(manifest["shape"])
    beta = manifest["beta"]
    images = np.fromfile(os.path.join(path, "images.bin"), dtype="<f4")
    n = len(manifest["ids"])
    expected = n * int(np.prod(shape))
    if images.size != expected:
        raise FormatError(f"image blob has {images.size} floats, expected {expected}")
    images = images.reshape((n,) + shape)
    samples = [
        Sample(id=sid, image=images[i], label=_unpack_hex_label(manifest["labels"][i], beta))
        for i, sid in enumerate(manifest["ids"])
    ]
    handle = DatasetHandle(samples, split=manifest["split"], beta=beta, shape=shape)
    if handle.fingerprint != manifest["fingerprint"]:
        raise FormatError("fingerprint mismatch after load")
    return handle
