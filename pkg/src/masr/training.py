"""Two-phase pretraining, checkpoints and the finite-difference gradient check."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from masr import checkpoint as ckpt
from masr._rng import derive_seed
from masr.config import RunConfig, from_dict
from masr.datasets import BatchSchedule, SynthSpec, synthesize_corpus, synthesize_langvec
from masr.masr_loss import StreamConfig
from masr.metadata import LangVecTable
from masr.model import build_stream_encoders, forward_backward, init_model, prepare_batch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class GradCheckError(AssertionError):
    pass


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads):
        self.t += 1
        dt = next(iter(params.values())).dtype
        b1, b2 = dt.type(self.beta1), dt.type(self.beta2)
        c1 = dt.type(1.0 - self.beta1 ** self.t)
        c2 = dt.type(1.0 - self.beta2 ** self.t)
        lr, eps = dt.type(self.lr), dt.type(self.eps)
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    config: RunConfig
    model: object
    optimizer: Adam
    step: int = 0


def _dtype(config):
    return np.float64 if config.training.precision == "float64" else np.float32


def build_model(config, tables=None, dtype=None):
    """Fresh model for ``config``; ``tables`` can supply language tables in memory."""
    enc = config.encoder_config()
    encoders = build_stream_encoders(config.streams, config.seed, config.resolve, tables)
    return init_model(enc, config.seed, config.streams, encoders, dtype or _dtype(config),
                      code_dim=config.backbone.code_dim, mask_prob=config.backbone.mask_prob,
                      mask_span=config.backbone.mask_span)


def new_state(config, tables=None):
    t = config.training
    return TrainState(config=config, model=build_model(config, tables),
                      optimizer=Adam(t.lr, t.beta1, t.beta2, t.eps))


def metrics_line(step, phase, report):
    rec = {
        "step": step,
        "phase": phase,
        "l_ssl": report.l_ssl,
        "l_meta": report.l_meta,
        "l_masr": report.l_masr,
        "change_rate": report.change_rate,
        "empty_mask": report.empty_mask,
    }
    return json.dumps(rec, sort_keys=True)


def train(state, records, store, until=None, log_fh=None, on_step=None):
    """Advance ``state`` to step ``until`` (default: end of phase 2).

    Phase 1 optimises the SSL loss alone; phase 2 adds every configured
    stream at its ``lam``. Batches and masks are pure functions of
    ``(seed, step)``, so resuming from a checkpoint reproduces an
    uninterrupted run. Returns the list of metrics lines written.
    """
    cfg = state.config
    t = cfg.training
    total = t.phase1_steps + t.phase2_steps
    until = total if until is None else min(until, total)
    schedule = BatchSchedule(records, t.batch_size, cfg.seed, t.balance)
    lams = {s.name: s.lam for s in cfg.streams}
    targets_cache = {}
    lines = []
    model = state.model
    while state.step < until:
        step = state.step
        batch = schedule[step]
        feats = [store[i] for i in batch.ids]
        prepared = prepare_batch(model, batch.records, feats, derive_seed(cfg.seed, "mask", step),
                                 targets_cache)
        phase = 1 if step < t.phase1_steps else 2
        try:
            report, grads = forward_backward(model, prepared, lams if phase == 2 else None)
        except FloatingPointError as exc:
            raise TrainingError(f"step {step}: {exc}") from None
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"step {step}: non-finite gradient for '{name}'")
        state.optimizer.step(model.params, grads)
        state.step += 1
        line = metrics_line(step, phase, report)
        lines.append(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
        if on_step is not None:
            on_step(step, state, report)
        if step % 100 == 0:
            log.info("step %d phase %d l_ssl %.4f l_masr %.4f", step, phase, report.l_ssl, report.l_masr)
    return lines


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state, path):
    tensors = {f"param.{k}": v for k, v in state.model.params.items()}
    opt = state.optimizer
    for k in opt.m:
        tensors[f"adam.m.{k}"] = opt.m[k]
        tensors[f"adam.v.{k}"] = opt.v[k]
    tensors["adam.t"] = np.array([opt.t], dtype=np.int64)
    seeds = {"root": state.config.seed, "quantizer": state.model.quantizer.seed,
             "chars": state.model.char_seed}
    blob = ckpt.encode_checkpoint(state.step, seeds, state.config.canonical_json(), tensors)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, config=None, tables=None):
    """Restore a TrainState; with ``config`` given, its hash must match the stored one."""
    with open(path, "rb") as fh:
        blob = fh.read()
    step, seeds, config_json, tensors = ckpt.decode_checkpoint(blob)
    stored = from_dict(json.loads(config_json))
    if config is not None:
        if config.hash() != stored.hash():
            raise ckpt.CheckpointError("config hash mismatch: checkpoint was written with a different config")
        stored = config
    state = new_state(stored, tables)
    if state.model.quantizer.seed != seeds["quantizer"]:
        raise ckpt.CheckpointError("quantizer seed mismatch")
    for k in list(state.model.params):
        key = f"param.{k}"
        if key not in tensors:
            raise ckpt.CheckpointError(f"checkpoint lacks tensor '{k}'")
        if tensors[key].shape != state.model.params[k].shape:
            raise ckpt.CheckpointError(f"tensor '{k}' has shape {tensors[key].shape}, model expects "
                                       f"{state.model.params[k].shape}")
        state.model.params[k] = tensors[key].copy()
    opt = state.optimizer
    for key, value in tensors.items():
        if key.startswith("adam.m."):
            opt.m[key[7:]] = value.copy()
        elif key.startswith("adam.v."):
            opt.v[key[7:]] = value.copy()
    opt.t = int(tensors["adam.t"][0])
    state.step = step
    return state


# -- gradient check ----------------------------------------------------------

OBJECTIVES = ("ssl", "masr")


def objective_weights(model, objective):
    """(ssl_scale, lams) for ``"ssl"``, ``"masr"`` or ``("meta", stream)``."""
    if objective == "ssl":
        return 1.0, {}
    if objective == "masr":
        return 1.0, {s.name: s.lam for s in model.streams}
    kind, name = objective
    if kind != "meta":
        raise ValueError(f"unknown objective {objective!r}")
    return 0.0, {name: 1.0}


@dataclass
class GradCheckReport:
    objective: object
    errors: dict
    tolerance: float
    value: float

    @property
    def failures(self):
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self):
        return not self.failures

    def raise_if_failed(self):
        if self.failures:
            worst = ", ".join(f"{k} ({self.errors[k]:.3g})" for k in self.failures)
            raise GradCheckError(f"gradient check failed for {self.objective}: {worst}")


def relative_error(analytic, numeric, scale):
    """|a - n| / max(|a|, |n|, 1e-6 * max(1, |L|)); the floor absorbs round-off on near-zero entries."""
    floor = 1e-6 * max(1.0, abs(scale))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(model, batch, objective="masr", tolerance=1e-4, step=1e-5, entries=None, seed=0,
               analytic=None):
    """Central differences against the analytic gradient, per parameter tensor.

    Triplet selections are frozen at the unperturbed point. ``entries``
    limits the number of (seeded, random) coordinates checked per tensor;
    ``analytic`` may override the gradient under test.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    ssl_scale, lams = objective_weights(model, objective)
    base, grads = forward_backward(model, batch, lams, ssl_scale)
    if analytic is not None:
        grads = analytic
    frozen = base.selections
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(model.params):
        p = model.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = np.sort(rng.choice(flat.size, entries, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = forward_backward(model, batch, lams, ssl_scale, frozen, need_grads=False)[0].objective
            flat[i] = old - step
            down = forward_backward(model, batch, lams, ssl_scale, frozen, need_grads=False)[0].objective
            flat[i] = old
            numeric[n] = (up - down) / (2 * step)
        a = grads[name].reshape(-1)[idx]
        errors[name] = float(relative_error(a, numeric, base.objective).max()) if len(idx) else 0.0
    return GradCheckReport(objective=objective, errors=errors, tolerance=tolerance, value=base.objective)


def gradcheck_config(config):
    """Float64 copy of ``config`` with every stream kept; used for random instances."""
    return config.replace(training__precision="float64")


def random_instance(config, seed, margin=1e-3, attempts=100):
    """A seeded (model, batch) pair away from hinge kinks and selection ties.

    Builds a small synthetic corpus matching the backbone dimensions, a
    random float64 model, and resamples until every triplet slack and
    selection gap is at least ``margin``.
    """
    gc = config.gradcheck
    n_langs = max(2, min(4, gc.batch_size // 2))
    spec = SynthSpec(num_languages=n_langs, utterances_per_language=gc.batch_size, frames=gc.frames,
                     mel_bins=config.features.n_mels, confusable_pairs=[], noise=1.0,
                     seed=derive_seed(seed, "gc-corpus"), districts_per_language=2,
                     sentences_per_language=2)
    records, feats = synthesize_corpus(spec)
    tables = {s.name: LangVecTable("syntactic", synthesize_langvec(spec, dim=4))
              for s in config.streams if s.kind == "language"}
    streams = [StreamConfig(**{**s.__dict__, "table": None}) for s in config.streams]
    cfg = config.replace(training__precision="float64", seed=derive_seed(seed, "gc-model"),
                         streams=[s.__dict__ for s in streams])
    encoders = build_stream_encoders(cfg.streams, cfg.seed, tables=tables)
    for attempt in range(attempts):
        model = init_model(cfg.encoder_config(), derive_seed(seed, "gc-init", attempt), cfg.streams,
                           encoders, np.float64, code_dim=cfg.backbone.code_dim,
                           mask_prob=max(cfg.backbone.mask_prob, 0.3), mask_span=cfg.backbone.mask_span)
        rng = np.random.default_rng(derive_seed(seed, "gc-perturb", attempt))
        for name, p in model.params.items():
            p += 0.1 * rng.standard_normal(p.shape)
        order = rng.permutation(len(records))[:gc.batch_size]
        recs = [records[i] for i in order]
        batch = prepare_batch(model, recs, [feats[r.id] for r in recs], derive_seed(seed, "gc-mask", attempt))
        report, _ = forward_backward(model, batch, {s.name: 1.0 for s in model.streams}, need_grads=False)
        slacks = [abs(x) for v in report.slacks.values() for x in v]
        gaps = list(report.gaps.values())
        if report.empty_mask:
            continue
        if min(slacks, default=math.inf) >= margin and min(gaps, default=math.inf) >= margin:
            return model, batch
    raise GradCheckError(f"no kink-free instance found in {attempts} attempts")


def gradcheck_suite(config, instances=None, entries="config"):
    """Check L_SSL, every L_META^j and L_MASR on seeded random instances."""
    gc = config.gradcheck
    instances = gc.instances if instances is None else instances
    entries = gc.entries_per_tensor if entries == "config" else entries
    reports = []
    for k in range(instances):
        model, batch = random_instance(config, derive_seed(config.seed, "gradcheck", k))
        objectives = ["ssl"] + [("meta", s.name) for s in model.streams] + ["masr"]
        for obj in objectives:
            reports.append((k, grad_check(model, batch, obj, gc.tolerance, gc.step, entries, seed=k)))
    return reports
