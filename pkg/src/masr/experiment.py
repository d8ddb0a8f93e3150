"""Controlled synthetic experiment: SSL-only baseline versus SSL + metadata mining."""

import time
from dataclasses import dataclass

import numpy as np

from masr._rng import derive_seed
from masr.datasets import FeatureStore, SynthSpec, synthesize_corpus, synthesize_langvec
from masr.evaluation import metrics, probe_encoder, split_report, subset_accuracy
from masr.metadata import LangVecTable
from masr.model import embed
from masr.training import new_state, train


def synth_spec(config, seed=None):
    s = config.data.synth
    return SynthSpec(num_languages=s.num_languages, utterances_per_language=s.utterances_per_language,
                     frames=s.frames, mel_bins=config.features.n_mels,
                     confusable_pairs=[tuple(p) for p in s.confusable_pairs], noise=s.noise,
                     seed=config.seed if seed is None else seed,
                     districts_per_language=s.districts_per_language,
                     sentences_per_language=s.sentences_per_language)


def eval_spec(config, spec):
    s = config.data.synth
    return SynthSpec(**{**spec.__dict__, "utterances_per_language": s.eval_utterances_per_language})


def language_tables(config, spec):
    s = config.data.synth
    table = LangVecTable("syntactic", synthesize_langvec(spec, s.langvec_dim, s.langvec_pair_cosine))
    return {st.name: table for st in config.streams if st.kind == "language"}


def probe_split(records, fraction, seed):
    """Deterministic per-language split of ``records`` into probe-train and probe-test."""
    from masr._rng import rng_for

    by_lang = {}
    for r in records:
        by_lang.setdefault(r.language, []).append(r)
    train, test = [], []
    for lang in sorted(by_lang):
        items = by_lang[lang]
        order = rng_for(seed, "probe-split", lang).permutation(len(items))
        cut = int(round(fraction * len(items)))
        train += [items[i] for i in order[:cut]]
        test += [items[i] for i in order[cut:]]
    return train, test


def evaluate_probe(model, records, store, config, seed):
    """Probe on a train half of ``records`` and report on the other half."""
    classes = sorted({r.language for r in records})
    index = {c: k for k, c in enumerate(classes)}
    tr, te = probe_split(records, config.eval.train_fraction, seed)
    ev = config.eval
    probe = probe_encoder(model, [store[r.id] for r in tr], [index[r.language] for r in tr], classes,
                          seed=derive_seed(seed, "probe"), max_steps=ev.max_steps, tol=ev.tol,
                          window=ev.window)
    h = embed(model, [store[r.id] for r in te])
    scores = probe.scores(h)
    report = metrics(scores.argmax(axis=1), scores, [index[r.language] for r in te], classes)
    overlap = ev.overlap_languages if ev.overlap_languages is not None else classes
    split_report(report, overlap)
    return report, probe


@dataclass
class ArmResult:
    name: str
    seed: int
    report: object
    focus_accuracy: float
    lines: list
    seconds: float


def run_arm(config, name, seed, records, store, eval_records, eval_store, tables, focus):
    t0 = time.perf_counter()
    state = new_state(config, tables)
    lines = train(state, records, store)
    report, _ = evaluate_probe(state.model, eval_records, eval_store, config, seed)
    return ArmResult(name, seed, report, subset_accuracy(report, focus), lines, time.perf_counter() - t0)


def focus_languages(config):
    if config.eval.focus_languages is not None:
        return list(config.eval.focus_languages)
    return sorted({lang for a, b, _ in config.data.synth.confusable_pairs for lang in (a, b)})


def run_seed(config, seed):
    """Train both arms on one seed; the baseline spends all steps on SSL."""
    cfg = config.replace(seed=seed)
    spec = synth_spec(cfg)
    records, feats = synthesize_corpus(spec, "train")
    eval_records, eval_feats = synthesize_corpus(eval_spec(cfg, spec), "eval")
    store = FeatureStore(records, preloaded=feats)
    eval_store = FeatureStore(eval_records, preloaded=eval_feats)
    tables = language_tables(cfg, spec)
    t = cfg.training
    baseline_cfg = cfg.replace(training__phase1_steps=t.phase1_steps + t.phase2_steps, training__phase2_steps=0)
    focus = focus_languages(cfg)
    base = run_arm(baseline_cfg, "ssl", seed, records, store, eval_records, eval_store, tables, focus)
    masr = run_arm(cfg, "masr", seed, records, store, eval_records, eval_store, tables, focus)
    return base, masr
