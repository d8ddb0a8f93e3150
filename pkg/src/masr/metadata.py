"""Fixed metadata encoders: typological language vectors, sphere geo, byte-averaged text.

None of these carry learnable state. Every encoding is a unit vector; a
label the encoder cannot map yields ``None`` (a miss) and the caller drops
that utterance from the stream.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from masr._rng import rng_for
from masr.datasets import check_geo

CATEGORIES = ("syntactic", "geographic_feat", "phonetic", "featural", "genetic", "inventory")
EARTH_RADIUS_KM = 6371.0


class LangVecError(ValueError):
    pass


@dataclass(frozen=True)
class MetadataEncoding:
    stream: str
    vector: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"metadata encoding for stream '{self.stream}' has norm {norm}")


@dataclass(frozen=True)
class LangVecTable:
    category: str
    entries: dict

    @property
    def dim(self):
        return len(next(iter(self.entries.values())))

    def __contains__(self, label):
        return label in self.entries


def load_langvec(path, category="syntactic"):
    """Read a ``lang\\tf0\\tf1...`` TSV and l2-normalise every row."""
    if category not in CATEGORIES:
        raise LangVecError(f"unknown lang2vec category '{category}'")
    entries = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if not header or header[0] != "lang" or len(header) < 2:
            raise LangVecError(f"{path}: header must be 'lang<TAB>f0<TAB>...'")
        dim = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            label = row[0]
            if len(row) - 1 != dim:
                raise LangVecError(f"{path}:{lineno}: ragged row for '{label}' ({len(row) - 1} values, expected {dim})")
            if label in entries:
                raise LangVecError(f"{path}:{lineno}: duplicate label '{label}'")
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise LangVecError(f"{path}:{lineno}: non-numeric value for '{label}'") from None
            if not np.all(np.isfinite(vec)):
                raise LangVecError(f"{path}:{lineno}: non-finite value for '{label}'")
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise LangVecError(f"{path}:{lineno}: zero vector for '{label}' cannot be normalised")
            entries[label] = vec / norm
    if not entries:
        raise LangVecError(f"{path}: no languages")
    return LangVecTable(category=category, entries=entries)


def write_langvec(path, vectors):
    labels = list(vectors)
    dim = len(vectors[labels[0]])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["lang"] + [f"f{k}" for k in range(dim)]) + "\n")
        for lab in labels:
            fh.write("\t".join([lab] + [repr(float(v)) for v in vectors[lab]]) + "\n")


def encode_language(table, label):
    vec = table.entries.get(label)
    if vec is None:
        return None
    return MetadataEncoding("language", vec)


def encode_geo(lat, lon):
    """Point on the unit sphere; cosine distance is monotone in great-circle distance."""
    check_geo(lat, lon)
    phi, lam = math.radians(lat), math.radians(lon)
    vec = np.array([math.cos(phi) * math.cos(lam), math.cos(phi) * math.sin(lam), math.sin(phi)])
    return MetadataEncoding("geo", vec / np.linalg.norm(vec))


def haversine_km(a, b, radius=EARTH_RADIUS_KM):
    (lat1, lon1), (lat2, lon2) = a, b
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2 - lon1)
    s = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2) ** 2
    return 2.0 * radius * math.asin(math.sqrt(min(1.0, s)))


def char_table(seed, dim):
    """Seeded 256 x dim byte-embedding matrix (fixed, never trained)."""
    return rng_for(seed, "char-table").standard_normal((256, dim))


def encode_text(transcript, table):
    """Mean of the UTF-8 byte rows of ``table``, l2-normalised; None for empty text."""
    if not transcript:
        return None
    codes = np.frombuffer(transcript.encode("utf-8"), dtype=np.uint8)
    mean = np.asarray(table)[codes].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        return None
    return MetadataEncoding("text", mean / norm)


class StreamEncoder:
    """Label extraction plus fixed encoding for one metadata stream kind.

    ``label(record)`` is what defines same/different membership for mining;
    ``encode(record)`` returns the unit vector or None when the record has no
    usable label for this stream.
    """

    def __init__(self, kind, table=None):
        if kind not in ("language", "geo", "text"):
            raise ValueError(f"unknown stream kind '{kind}'")
        if kind in ("language", "text") and table is None:
            raise ValueError(f"stream kind '{kind}' needs a table")
        self.kind = kind
        self.table = table

    @property
    def dim(self):
        if self.kind == "geo":
            return 3
        if self.kind == "language":
            return self.table.dim
        return self.table.shape[1]

    def label(self, record):
        if self.kind == "language":
            return record.language if record.language in self.table else None
        if self.kind == "geo":
            return record.geo
        return record.text or None

    def encode(self, record):
        if self.kind == "language":
            enc = encode_language(self.table, record.language)
        elif self.kind == "geo":
            enc = None if record.geo is None else encode_geo(*record.geo)
        else:
            enc = encode_text(record.text, self.table)
        return None if enc is None else enc.vector
