"""Run configuration.

A run is described by one JSON file; every hyperparameter has a default
here. Unknown keys and invalid values are collected and reported together.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from masr.masr_loss import StreamConfig
from masr.ssl_backbone import EncoderConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class SynthSection:
    num_languages: int = 8
    utterances_per_language: int = 64
    eval_utterances_per_language: int = 300
    frames: int = 64
    confusable_pairs: list = field(default_factory=lambda: [["l00", "l01", 0.1], ["l02", "l03", 0.1]])
    noise: float = 0.1
    districts_per_language: int = 3
    sentences_per_language: int = 4
    langvec_dim: int = 16
    langvec_pair_cosine: float = 0.9


@dataclass
class DataSection:
    train_manifest: str = None
    eval_manifest: str = None
    synth: SynthSection = field(default_factory=SynthSection)


@dataclass
class FeaturesSection:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    floor: float = 1e-10


@dataclass
class BackboneSection:
    stack: int = 2
    context: int = 1
    layers: int = 2
    dim: int = 64
    vocab: int = 64
    code_dim: int = 16
    mask_prob: float = 0.1
    mask_span: int = 2


@dataclass
class TrainingSection:
    phase1_steps: int = 2000
    phase2_steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "float32"
    balance: str = "label-balanced"
    eval_every: int = 0
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    max_steps: int = 5000
    tol: float = 1e-5
    window: int = 50
    train_fraction: float = 0.5
    overlap_languages: list = None
    focus_languages: list = None


@dataclass
class DiagSection:
    batches: int = 32


@dataclass
class GradcheckSection:
    instances: int = 20
    tolerance: float = 1e-4
    step: float = 1e-5
    entries_per_tensor: int = 16
    batch_size: int = 8
    frames: int = 12


_SECTIONS = {
    "data": DataSection,
    "features": FeaturesSection,
    "backbone": BackboneSection,
    "training": TrainingSection,
    "eval": EvalSection,
    "diag": DiagSection,
    "gradcheck": GradcheckSection,
}


def default_streams():
    return [StreamConfig(name="language", kind="language", table="langvec.tsv")]


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    streams: list = field(default_factory=default_streams)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    diag: DiagSection = field(default_factory=DiagSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    base_dir: str = field(default=".", compare=False, repr=False)

    def encoder_config(self):
        return EncoderConfig(mel_bins=self.features.n_mels, stack=self.backbone.stack,
                             context=self.backbone.context, layers=self.backbone.layers,
                             dim=self.backbone.dim, vocab=self.backbone.vocab)

    def resolve(self, path):
        if path is None or os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)

    def to_dict(self):
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        out["streams"] = [dataclasses.asdict(s) for s in self.streams]
        return out

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def replace(self, **sections):
        """Copy with whole sections or nested ``section__field`` values replaced."""
        data = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                if sec == "synth":
                    data["data"]["synth"][name] = value
                else:
                    data[sec][name] = value
            else:
                data[key] = value
        return from_dict(data, base_dir=self.base_dir)


def _check_section(cls, data, where, problems):
    if not isinstance(data, dict):
        problems.append(f"{where}: expected an object")
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(data) - names):
        problems.append(f"{where}.{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "synth" and cls is DataSection:
            value = _check_section(SynthSection, value, f"{where}.synth", problems)
        kwargs[f.name] = value
    return cls(**kwargs)


def _validate(cfg, problems):
    t = cfg.training
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        problems.append("seed: must be a non-negative integer")
    if t.phase1_steps < 0 or t.phase2_steps < 0:
        problems.append("training: step counts must be >= 0")
    if t.checkpoint_every < 0:
        problems.append("training.checkpoint_every: must be >= 0")
    if t.batch_size < 2:
        problems.append("training.batch_size: must be >= 2")
    if not t.lr > 0:
        problems.append("training.lr: must be > 0")
    if t.precision not in ("float32", "float64"):
        problems.append("training.precision: must be 'float32' or 'float64'")
    if t.balance not in ("label-balanced", "shuffle"):
        problems.append("training.balance: must be 'label-balanced' or 'shuffle'")
    b = cfg.backbone
    for key in ("stack", "dim", "vocab", "code_dim", "mask_span"):
        if getattr(b, key) < 1:
            problems.append(f"backbone.{key}: must be >= 1")
    if b.layers < 0 or b.context < 0:
        problems.append("backbone: layers and context must be >= 0")
    if not 0.0 <= b.mask_prob <= 1.0:
        problems.append("backbone.mask_prob: must be in [0, 1]")
    if not 0.0 < cfg.eval.train_fraction < 1.0:
        problems.append("eval.train_fraction: must be in (0, 1)")
    names = [s.name for s in cfg.streams]
    if len(set(names)) != len(names):
        problems.append("streams: names must be unique")


def from_dict(data, base_dir="."):
    problems = []
    if not isinstance(data, dict):
        raise ConfigError(["config: expected a JSON object"])
    allowed = {"seed", "streams"} | set(_SECTIONS)
    for key in sorted(set(data) - allowed):
        problems.append(f"{key}: unknown key")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = data["seed"]
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _check_section(cls, data[name], name, problems)
    if "streams" in data:
        streams = []
        stream_fields = {f.name for f in dataclasses.fields(StreamConfig)}
        for k, raw in enumerate(data["streams"]):
            where = f"streams[{k}]"
            if not isinstance(raw, dict):
                problems.append(f"{where}: expected an object")
                continue
            for key in sorted(set(raw) - stream_fields):
                problems.append(f"{where}.{key}: unknown key")
            if "name" not in raw:
                problems.append(f"{where}.name: required")
                continue
            try:
                streams.append(StreamConfig(**{k2: v for k2, v in raw.items() if k2 in stream_fields}))
            except (TypeError, ValueError) as exc:
                problems.append(f"{where}: {exc}")
        kwargs["streams"] = streams
    try:
        cfg = RunConfig(base_dir=base_dir, **kwargs)
    except TypeError as exc:
        problems.append(str(exc))
        raise ConfigError(problems) from None
    try:
        _validate(cfg, problems)
    except TypeError as exc:
        problems.append(f"type error: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: parse error at line {exc.lineno}: {exc.msg}"]) from None
    return from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
