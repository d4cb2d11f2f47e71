"""Binary-code database index, Hamming top-K queries, and MAP evaluation.

Codes are stored packed (1 bit per component, bit 0 = component 0). Ranking
ties are broken by ascending insertion id so that Top-K composition, and
therefore ASR, is deterministic.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .models import binarize

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def pack_signs(signs):
    """Pack a +-1 vector (or matrix) into uint8 rows, bit 0 = component 0."""
    arr = np.asarray(signs)
    bits = (arr > 0).astype(np.uint8)
    return np.packbits(bits, axis=-1, bitorder="little")


def unpack_signs(packed, gamma):
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=-1,
                         count=gamma, bitorder="little")
    return np.where(bits > 0, 1, -1).astype(np.int8)


@dataclass(frozen=True)
class HashCode:
    packed: bytes
    gamma: int

    @classmethod
    def from_signs(cls, signs):
        signs = np.asarray(signs)
        if signs.ndim != 1:
            raise InputError("HashCode wants a 1-D sign vector")
        if not np.all(np.isin(signs, (-1, 1))):
            raise InputError("hash code entries must be +-1")
        return cls(packed=pack_signs(signs).tobytes(), gamma=signs.shape[0])

    @classmethod
    def from_continuous(cls, continuous):
        return cls.from_signs(binarize(continuous))

    def signs(self):
        return unpack_signs(np.frombuffer(self.packed, dtype=np.uint8), self.gamma)


def hamming_distance(h1, h2):
    """Number of differing components; equals ||h1-h2||_1 / 2 for +-1 codes."""
    if h1.gamma != h2.gamma:
        raise InputError(f"code length mismatch: {h1.gamma} vs {h2.gamma}")
    a = np.frombuffer(h1.packed, dtype=np.uint8)
    b = np.frombuffer(h2.packed, dtype=np.uint8)
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


class RetrievalIndex:
    """Immutable database of packed codes with labels and stable ids."""

    def __init__(self, codes_packed, labels, ids, gamma):
        codes_packed = np.asarray(codes_packed, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.uint8)
        if not (codes_packed.shape[0] == labels.shape[0] == len(ids)):
            raise InputError("codes, labels, and ids must have equal length")
        self.codes_packed = codes_packed
        self.labels = labels
        self.ids = list(ids)
        self.gamma = gamma

    def __len__(self):
        return self.codes_packed.shape[0]

    @property
    def beta(self):
        return self.labels.shape[1]

    def distances(self, code):
        if code.gamma != self.gamma:
            raise InputError(f"query gamma {code.gamma} != index gamma {self.gamma}")
        q = np.frombuffer(code.packed, dtype=np.uint8)
        return _POPCOUNT[np.bitwise_xor(self.codes_packed, q[None, :])].sum(axis=1)


def build_index(model, dataset, batch_size=256):
    """Encode+binarize every sample, preserving dataset order."""
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    continuous = model.encode_batch(dataset.images(), batch_size=batch_size)
    packed = pack_signs(binarize(continuous))
    return RetrievalIndex(packed, dataset.labels(), dataset.ids(), model.config.gamma)


def query_topk(index, code, k):
    """Top-K by ascending Hamming distance, ties by ascending insertion id."""
    if k < 1 or k > len(index):
        raise InputError(f"K={k} out of range for index of size {len(index)}")
    dists = index.distances(code)
    # stable sort on distance preserves insertion order within ties
    order = np.argsort(dists, kind="stable")[:k]
    return [(index.ids[i], int(dists[i]), index.labels[i].copy()) for i in order]


def _relevant_mask(index, query_label):
    q = np.asarray(query_label, dtype=bool)
    return (index.labels.astype(bool) & q[None, :]).any(axis=1)


def map_score(index, query_set, r=None):
    """Mean average precision over the top-R ranked list (R default: full DB).

    Relevance = nonempty label intersection. AP normalizes by
    min(total relevant in DB, R); queries with zero relevant items count as 0.
    """
    if not query_set:
        raise InputError("empty query set")
    if r is None:
        r = len(index)
    aps = []
    for code, label in query_set:
        dists = index.distances(code)
        order = np.argsort(dists, kind="stable")[:r]
        rel = _relevant_mask(index, label)
        total_rel = int(rel.sum())
        if total_rel == 0:
            aps.append(0.0)
            continue
        hits = rel[order]
        ranks = np.flatnonzero(hits) + 1
        precision_at_hit = np.arange(1, ranks.size + 1) / ranks
        aps.append(float(precision_at_hit.sum() / min(total_rel, r)))
    return float(np.mean(aps))


def save_index(index, path):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "gamma": index.gamma,
        "n_db": len(index),
        "beta": int(index.beta),
        "ids": index.ids,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    with open(os.path.join(path, "codes.bin"), "wb") as fh:
        fh.write(index.codes_packed.tobytes())
    packed_labels = np.packbits(index.labels, axis=-1, bitorder="little")
    with open(os.path.join(path, "labels.bin"), "wb") as fh:
        fh.write(packed_labels.tobytes())


def load_index(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    n, gamma, beta = manifest["n_db"], manifest["gamma"], manifest["beta"]
    code_bytes = (gamma + 7) // 8
    codes = np.fromfile(os.path.join(path, "codes.bin"), dtype=np.uint8)
    if codes.size != n * code_bytes:
        raise FormatError("code blob size mismatch")
    label_bytes = (beta + 7) // 8
    raw = np.fromfile(os.path.join(path, "labels.bin"), dtype=np.uint8)
    if raw.size != n * label_bytes:
        raise FormatError("label blob size mismatch")
    labels = np.unpackbits(raw.reshape(n, label_bytes), axis=-1, count=beta,
                           bitorder="little")
    return RetrievalIndex(codes.reshape(n, code_bytes), labels, manifest["ids"], gamma)
