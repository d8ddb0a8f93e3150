"""Manifests, feature files, the synthetic corpus and batch assembly.

A manifest is UTF-8 JSON lines, one utterance per line::

    {"id": "u1", "features": "features/u1.feat", "language": "de",
     "lat": 52.5, "lon": 13.4, "text": "hallo"}

``features`` may be a path (relative to the manifest) to a ``MASRFEAT`` file
or an inline list of frames; ``audio`` may be given instead, pointing at a
PCM16 mono WAV file.
"""

import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from masr._rng import derive_seed, rng_for

FEAT_MAGIC = b"MASRFEAT"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<8sIII")

_REQUIRED = ("id", "language")
_KNOWN = {"id", "features", "audio", "language", "lat", "lon", "text"}


class ManifestError(ValueError):
    """Invalid manifest content; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FeatureFileError(ValueError):
    pass


class BalanceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    source: object
    language: str
    source_kind: str = "features"
    lat: float = None
    lon: float = None
    text: str = None

    @property
    def geo(self):
        if self.lat is None:
            return None
        return (self.lat, self.lon)

    def to_json(self):
        out = {"id": self.id, self.source_kind: self.source, "language": self.language}
        if self.lat is not None:
            out["lat"] = self.lat
            out["lon"] = self.lon
        if self.text is not None:
            out["text"] = self.text
        return out


def check_geo(lat, lon):
    """Raise ValueError naming the field if (lat, lon) is out of range."""
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"lat={lat} outside [-90, 90]")
    if not -180.0 < lon <= 180.0:
        raise ValueError(f"lon={lon} outside (-180, 180]")


def parse_record(obj, line=None):
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", line)
    unknown = sorted(set(obj) - _KNOWN)
    if unknown:
        raise ManifestError(f"unknown field(s): {', '.join(unknown)}", line)
    for name in _REQUIRED:
        if name not in obj:
            raise ManifestError(f"missing required field '{name}'", line)
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise ManifestError("field 'id' must be a non-empty string", line)
    if not isinstance(obj["language"], str) or not obj["language"]:
        raise ManifestError("field 'language' must be a non-empty string", line)

    has_feat, has_audio = "features" in obj, "audio" in obj
    if has_feat == has_audio:
        raise ManifestError("exactly one of 'features' or 'audio' is required", line)
    kind = "features" if has_feat else "audio"
    source = obj[kind]
    if kind == "audio" and not isinstance(source, str):
        raise ManifestError("field 'audio' must be a path", line)
    if kind == "features" and not isinstance(source, (str, list)):
        raise ManifestError("field 'features' must be a path or a list of frames", line)

    lat, lon = obj.get("lat"), obj.get("lon")
    if (lat is None) != (lon is None):
        raise ManifestError("'lat' and 'lon' must be given together", line)
    if lat is not None:
        for name, value in (("lat", lat), ("lon", lon)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ManifestError(f"field '{name}' must be a number", line)
        try:
            check_geo(lat, lon)
        except ValueError as exc:
            raise ManifestError(f"range error: {exc}", line) from None
        lat, lon = float(lat), float(lon)

    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise ManifestError("field 'text' must be a string", line)
    return ManifestRecord(id=obj["id"], source=source, language=obj["language"],
                          source_kind=kind, lat=lat, lon=lon, text=text)


def load_manifest(path):
    """Read and validate a JSON-lines manifest."""
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"parse error: {exc.msg}", lineno) from None
            rec = parse_record(obj, lineno)
            if rec.id in seen:
                raise ManifestError(f"duplicate id '{rec.id}' (first on line {seen[rec.id]})", lineno)
            seen[rec.id] = lineno
            records.append(rec)
    return records


def dump_manifest(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=False) + "\n")


# -- feature files -----------------------------------------------------------

def write_features(path, matrix):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    T, F = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, F))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FEAT_HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, T, F = _FEAT_HEADER.unpack_from(blob)
    if magic != FEAT_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    expected = _FEAT_HEADER.size + 4 * T * F
    if len(blob) != expected:
        raise FeatureFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_FEAT_HEADER.size)
    return values.reshape(T, F).astype(np.float32)


def load_record_features(record, base_dir=".", logmel_config=None):
    """Feature matrix for one record (file, inline frames or WAV)."""
    if record.source_kind == "features":
        if isinstance(record.source, list):
            return np.asarray(record.source, dtype=np.float32)
        return read_features(os.path.join(base_dir, record.source))
    from masr.features import LogMelConfig, logmel, read_wav

    samples, rate = read_wav(os.path.join(base_dir, record.source))
    return logmel(samples, rate, logmel_config or LogMelConfig()).astype(np.float32)


class FeatureStore:
    """Lazy id -> feature matrix cache for one manifest."""

    def __init__(self, records, base_dir=".", logmel_config=None, preloaded=None):
        self.base_dir = base_dir
        self.logmel_config = logmel_config
        self._records = {r.id: r for r in records}
        self._cache = dict(preloaded or {})

    def __getitem__(self, record_id):
        if record_id not in self._cache:
            rec = self._records[record_id]
            self._cache[record_id] = load_record_features(rec, self.base_dir, self.logmel_config)
        return self._cache[record_id]


# -- synthetic corpus --------------------------------------------------------

@dataclass
class SynthSpec:
    num_languages: int = 8
    utterances_per_language: int = 64
    frames: int = 64
    mel_bins: int = 40
    confusable_pairs: list = field(default_factory=lambda: [("l00", "l01", 0.1), ("l02", "l03", 0.1)])
    noise: float = 0.1
    seed: int = 0
    districts_per_language: int = 3
    sentences_per_language: int = 4

    def __post_init__(self):
        self.confusable_pairs = [tuple(p) for p in self.confusable_pairs]
        self.validate()

    @property
    def languages(self):
        return [f"l{k:02d}" for k in range(self.num_languages)]

    def validate(self):
        if self.num_languages < 1 or self.utterances_per_language < 1:
            raise ValueError("num_languages and utterances_per_language must be >= 1")
        if self.frames < 1 or self.mel_bins < 1:
            raise ValueError("frames and mel_bins must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        langs = set(self.languages)
        derived = set()
        for a, b, eps in self.confusable_pairs:
            if a not in langs or b not in langs:
                raise ValueError(f"confusable pair ({a}, {b}) references an undeclared language")
            if a == b:
                raise ValueError(f"confusable pair ({a}, {b}) pairs a language with itself")
            if not 0.0 <= eps < 1.0:
                raise ValueError(f"perturbation scale {eps} outside [0, 1)")
            if b in derived:
                raise ValueError(f"language {b} is perturbed by more than one pair")
            derived.add(b)


def language_templates(spec):
    """Unit-norm spectral template per language; pair members are tied to their partner.

    With unit templates the pair scale is relative: ``eps`` is the length of
    the offset as a fraction of the template length.
    """
    rng = rng_for(spec.seed, "templates")
    templates = {}
    for lang in spec.languages:
        t = rng.standard_normal(spec.mel_bins)
        templates[lang] = t / np.linalg.norm(t)
    for a, b, eps in spec.confusable_pairs:
        u = rng_for(spec.seed, "perturbation", a, b).standard_normal(spec.mel_bins)
        u /= np.linalg.norm(u)
        templates[b] = templates[a] + eps * u
    return templates


def _side_labels(spec):
    rng = rng_for(spec.seed, "side-labels")
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz "))
    geo, sentences = {}, {}
    for lang in spec.languages:
        lat0, lon0 = rng.uniform(-60, 60), rng.uniform(-170, 170)
        geo[lang] = [(round(float(lat0 + rng.uniform(-2, 2)), 4), round(float(lon0 + rng.uniform(-2, 2)), 4))
                     for _ in range(spec.districts_per_language)]
        sentences[lang] = ["".join(rng.choice(letters, size=int(rng.integers(8, 24)))).strip() or "a"
                           for _ in range(spec.sentences_per_language)]
    return geo, sentences


def synthesize_corpus(spec, split="train", feature_dir="features"):
    """Generate records and features for one split of the synthetic corpus.

    Templates depend only on ``spec.seed``; the per-utterance noise and side
    labels also depend on ``split`` so that train/eval draws are independent.
    """
    templates = language_templates(spec)
    geo, sentences = _side_labels(spec)
    records, feats = [], {}
    for lang in spec.languages:
        rng = rng_for(spec.seed, "utterances", split, lang)
        for k in range(spec.utterances_per_language):
            uid = f"{split}-{lang}-{k:04d}"
            x = templates[lang][None, :] + spec.noise * rng.standard_normal((spec.frames, spec.mel_bins))
            lat, lon = geo[lang][int(rng.integers(len(geo[lang])))]
            text = sentences[lang][int(rng.integers(len(sentences[lang])))]
            feats[uid] = x.astype(np.float32)
            records.append(ManifestRecord(id=uid, source=f"{feature_dir}/{uid}.feat", language=lang,
                                          lat=lat, lon=lon, text=text))
    return records, feats


def write_corpus(out_dir, records, feats, manifest_name):
    """Write feature files plus the manifest; returns the manifest path."""
    for rec in records:
        path = os.path.join(out_dir, rec.source)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_features(path, feats[rec.id])
    manifest = os.path.join(out_dir, manifest_name)
    dump_manifest(records, manifest)
    return manifest


# -- batching ----------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    index: int
    records: tuple

    @property
    def size(self):
        return len(self.records)

    @property
    def ids(self):
        return [r.id for r in self.records]


def _balanced_order(labels, rng):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    chunks = []
    for lab in sorted(groups):
        idx = [groups[lab][j] for j in rng.permutation(len(groups[lab]))]
        chunks.extend(idx[i:i + 2] for i in range(0, len(idx), 2))
    order = rng.permutation(len(chunks))
    return [i for c in order for i in chunks[c]]


def _is_good(labs):
    return len(set(labs)) >= 2 and len(set(labs)) < len(labs)


def _repair(batches, labels):
    # Swap single items between batches until every batch has >= 2 labels and
    # a repeated label, when some swap achieves that.
    for b, batch in enumerate(batches):
        if _is_good([labels[i] for i in batch]):
            continue
        done = False
        for pos in range(len(batch) - 1, -1, -1):
            for o, other in enumerate(batches):
                if o == b:
                    continue
                for opos in range(len(other)):
                    cand_b = batch[:pos] + [other[opos]] + batch[pos + 1:]
                    cand_o = other[:opos] + [batch[pos]] + other[opos + 1:]
                    if _is_good([labels[i] for i in cand_b]) and _is_good([labels[i] for i in cand_o]):
                        batches[b], batches[o] = cand_b, cand_o
                        done = True
                        break
                if done:
                    break
            if done:
                break
    return batches


def make_batches(records, batch_size, seed, balance="label-balanced", label=lambda r: r.language):
    """One epoch of batches; a pure function of its arguments.

    The trailing partial batch is dropped. ``label-balanced`` orders items in
    same-label pairs so both positives and negatives exist for most anchors;
    it falls back to a plain shuffle (with a warning) on single-label data.
    """
    if batch_size < 2:
        raise ValueError(f"batch size must be >= 2, got {batch_size}")
    if batch_size > len(records):
        raise ValueError(f"batch size {batch_size} larger than corpus ({len(records)} records)")
    if balance not in ("label-balanced", "shuffle"):
        raise ValueError(f"unknown balance strategy '{balance}'")
    rng = rng_for(seed, "batches")
    labels = [label(r) for r in records]
    if balance == "label-balanced" and len(set(labels)) < 2:
        warnings.warn("label-balanced batching infeasible on a single-label corpus; shuffling",
                      BalanceWarning, stacklevel=2)
        balance = "shuffle"
    if balance == "shuffle":
        order = [int(i) for i in rng.permutation(len(records))]
    else:
        order = _balanced_order(labels, rng)
    n = len(order) // batch_size
    groups = [order[k * batch_size:(k + 1) * batch_size] for k in range(n)]
    if balance == "label-balanced":
        groups = _repair(groups, labels)
    return [Batch(index=k, records=tuple(records[i] for i in g)) for k, g in enumerate(groups)]


class BatchSchedule:
    """Maps a global step to its batch: epoch ``e`` reshuffles with a seed derived from ``(seed, e)``."""

    def __init__(self, records, batch_size, seed, balance="label-balanced"):
        self.records = list(records)
        self.batch_size = batch_size
        self.seed = seed
        self.balance = balance
        self.per_epoch = len(self.records) // batch_size if batch_size <= len(self.records) else 0
        self._epoch = None
        self._batches = None

    def epoch(self, e):
        if self._epoch != e:
            with warnings.catch_warnings():
                if e > 0:
                    warnings.simplefilter("ignore", BalanceWarning)
                self._batches = make_batches(self.records, self.batch_size,
                                             derive_seed(self.seed, "epoch", e), self.balance)
            self._epoch = e
        return self._batches

    def __getitem__(self, step):
        if self.per_epoch == 0:
            make_batches(self.records, self.batch_size, self.seed, self.balance)
        e, k = divmod(step, self.per_epoch)
        return self.epoch(e)[k]


def synthesize_langvec(spec, dim=16, pair_cosine=0.9):
    """Fixture typological vectors: random per language, confusable pairs at a fixed cosine."""
    rng = rng_for(spec.seed, "langvec")
    vecs = {}
    for lang in spec.languages:
        v = rng.standard_normal(dim)
        vecs[lang] = v / np.linalg.norm(v)
    for a, b, _ in spec.confusable_pairs:
        u = rng.standard_normal(dim)
        u -= np.dot(u, vecs[a]) * vecs[a]
        u /= np.linalg.norm(u)
        vecs[b] = pair_cosine * vecs[a] + np.sqrt(1.0 - pair_cosine ** 2) * u
    return vecs
