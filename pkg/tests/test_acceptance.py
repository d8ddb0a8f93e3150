"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The end-to-end
experiment (criteria 8 to 10) is shared through a module fixture.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import Corpus, tiny_config
from masr.config import RunConfig
from masr.evaluation import metrics
from masr.experiment import run_seed
from masr.masr_loss import TripletSelection, build_sets, cosine_distance, mine, selection_change_rate, triplet_loss
from masr.metadata import encode_geo, haversine_km
from masr.training import gradcheck_suite, new_state, train
from test_evaluation import brute_metrics, random_fixture
from test_masr_loss import oracle_mine, random_batch

SEEDS = (0, 1, 2)


def test_c01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    # Default model with sampled coordinates, then a small model with every coordinate.
    sampled = gradcheck_suite(RunConfig())
    full = gradcheck_suite(tiny_config(), entries=None)
    secs = time.perf_counter() - t0
    reports = [r for _, r in sampled + full]
    worst = max(max(r.errors.values()) for r in reports)
    tensors = {k for r in reports for k in r.errors}
    failed = sorted({f"{r.objective}:{k}" for r in reports for k in r.failures})
    ok = not failed and worst <= 1e-4 and secs < 120
    verdict(1, ok, f"{len(reports)} checks over 2x20 instances, {len(tensors)} tensors, "
                   f"max rel err {worst:.2e}, {secs:.0f}s")
    assert ok, failed


def test_c02_mining_oracle(verdict):
    rng = np.random.default_rng(1000)
    mismatches = 0
    for n in range(1000):
        B = int(rng.integers(2, 33))
        q, e, labels = random_batch(rng, B)
        if n % 4 == 0:
            labels = [lab if rng.random() > 0.15 else None for lab in labels]
        alpha = float(rng.choice([0.0, 0.5, 1.0, 3.0]))
        sels = mine(q, e, alpha, build_sets(labels))
        got = [(s.k_plus, s.k_minus) for s in sels]
        mismatches += got != oracle_mine(q, e, alpha, labels)
    verdict(2, mismatches == 0, f"1000 random batches, B in 2..32 with duplicated rows, {mismatches} mismatches")
    assert mismatches == 0


def test_c03_alpha_zero_no_change(verdict):
    rng = np.random.default_rng(3000)
    rates = []
    for _ in range(1000):
        q, e, labels = random_batch(rng, int(rng.integers(2, 33)))
        rates.append(selection_change_rate(q, e, 0.0, build_sets(labels)))
    ok = all(r == 0.0 for r in rates)
    verdict(3, ok, f"alpha=0 on 1000 batches, max change rate {max(rates)}")
    assert ok


def _trajectory(cfg, corpus):
    hashes = []

    def on_step(step, state, report):
        h = hashlib.sha256()
        for name in sorted(state.model.params):
            h.update(state.model.params[name].tobytes())
        hashes.append(h.hexdigest())

    state = new_state(cfg, corpus.tables)
    train(state, corpus.records, corpus.store, on_step=on_step)
    return hashes


def test_c04_lambda_zero_bitwise(verdict):
    base = RunConfig().replace(training__precision="float64", training__phase1_steps=20,
                               training__phase2_steps=200)
    zero = base.replace(streams=[{**s.__dict__, "lam": 0.0} for s in base.streams])
    ssl = base.replace(training__phase1_steps=220, training__phase2_steps=0)
    corpus = Corpus(base)
    with threadpool_limits(limits=1):
        a = _trajectory(zero, corpus)
        b = _trajectory(ssl, corpus)
    first = next((k for k, (x, y) in enumerate(zip(a, b)) if x != y), None)
    ok = len(a) == len(b) == 220 and first is None
    verdict(4, ok, f"220 steps (200 in phase 2), float64, 1 thread, first divergence: {first}")
    assert ok


def _unit_circle(dp, dn):
    ap, an = math.acos(1 - dp), math.acos(1 - dn)
    return np.array([[1.0, 0.0], [math.cos(ap), math.sin(ap)], [math.cos(an), -math.sin(an)]])


@pytest.fixture(scope="module")
def experiment():
    cfg = RunConfig()
    t0 = time.perf_counter()
    arms = {seed: run_seed(cfg, seed) for seed in SEEDS}
    secs = time.perf_counter() - t0
    return cfg, arms, secs


def test_c05_loss_fidelity(experiment, verdict):
    cfg, arms, _ = experiment
    lams = {s.name: s.lam for s in cfg.streams}
    bad = 0
    for base, masr in arms.values():
        for rec in map(json.loads, base.lines + masr.lines):
            total = rec["l_ssl"]
            for name, value in rec["l_meta"].items():
                total += lams[name] * value
            bad += rec["l_masr"] != total
    sel = [TripletSelection(0, 1, 2)]
    satisfied = triplet_loss(sel, _unit_circle(0.1, 0.5), 0.2)[0]
    slack = triplet_loss(sel, _unit_circle(0.4, 0.45), 0.2)[0]
    ok = bad == 0 and satisfied == 0.0 and abs(slack - 0.15) <= 1e-12
    verdict(5, ok, f"{bad} inexact logged totals; margin-satisfied {satisfied}, slack case {slack:.15f}")
    assert ok


def test_c06_metric_oracles(verdict):
    rng = np.random.default_rng(6000)
    bad = 0
    for _ in range(200):
        K, labels, scores, pred = random_fixture(rng)
        rep = metrics(pred, scores, labels, [f"c{k}" for k in range(K)])
        cm, acc, f1, eer = brute_metrics(pred.tolist(), labels.tolist(), scores.tolist(), K)
        same = (rep.confusion.tolist() == cm and abs(rep.accuracy - acc) <= 1e-12
                and abs(rep.macro_f1 - f1) <= 1e-12
                and (rep.eer is None if eer is None else abs(rep.eer - eer) <= 1e-12))
        bad += not same
    y = np.array([0, 1, 2, 0, 1, 2])
    perfect = metrics(y, np.eye(3)[y], y, ["a", "b", "c"])
    uniform = metrics(np.zeros(6, int), np.full((6, 3), 1 / 3), y, ["a", "b", "c"])
    trivial = (perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0 and perfect.eer == 0.0
               and uniform.eer == 0.5)
    ok = bad == 0 and trivial
    verdict(6, ok, f"200 fixtures, {bad} oracle mismatches; perfect/uniform exact: {trivial}")
    assert ok


def test_c07_geo(verdict):
    rng = np.random.default_rng(7000)
    lat = np.degrees(np.arcsin(rng.uniform(-1, 1, (1000, 2))))
    lon = rng.uniform(-180, 180, (1000, 2))
    lon[lon == -180] = 180
    hav = [haversine_km((lat[k, 0], lon[k, 0]), (lat[k, 1], lon[k, 1])) for k in range(1000)]
    cos = [cosine_distance(encode_geo(lat[k, 0], lon[k, 0]).vector, encode_geo(lat[k, 1], lon[k, 1]).vector)
           for k in range(1000)]
    ranks = np.argsort(hav, kind="stable").tolist() == np.argsort(cos, kind="stable").tolist()
    ident = haversine_km((48.1, 11.6), (48.1, 11.6))
    anti = haversine_km((0.0, 0.0), (0.0, 180.0))
    ok = ranks and ident == 0.0 and abs(anti - 20015.087) / 20015.087 <= 1e-6
    verdict(7, ok, f"rank agreement over 1000 pairs: {ranks}; identity {ident}, antipode {anti:.4f} km")
    assert ok


def test_c08_end_to_end(experiment, verdict):
    _, arms, secs = experiment
    gaps = [masr.focus_accuracy - base.focus_accuracy for base, masr in arms.values()]
    per_seed = ", ".join(f"seed {s}: {b.focus_accuracy:.3f} -> {m.focus_accuracy:.3f}"
                         for s, (b, m) in arms.items())
    mean_gap = float(np.mean(gaps))
    ok = mean_gap >= 0.0 and not all(g < 0 for g in gaps) and secs < 900
    note = "meets 3-point target" if mean_gap >= 0.03 else "below 3-point target"
    verdict(8, ok, f"confusable-pair accuracy SSL -> MASR ({per_seed}); mean gap {100 * mean_gap:+.1f} points, "
                   f"{note}; {secs:.0f}s")
    assert ok


def test_c09_selection_change(experiment, verdict):
    _, arms, _ = experiment
    per_seed = {}
    for seed, (_, masr) in arms.items():
        recs = [json.loads(x) for x in masr.lines]
        per_seed[seed] = [r["change_rate"]["language"] for r in recs if r["phase"] == 2]
    rates = np.concatenate([np.array(v) for v in per_seed.values()])
    phase2 = RunConfig().training.phase2_steps
    ok = all(len(v) == phase2 for v in per_seed.values()) and rates.mean() > 0
    detail = ", ".join(f"seed {s}: mean {np.mean(v):.3f} over {len(v)} batches" for s, v in per_seed.items())
    verdict(9, ok, f"alpha=1 change rate {detail}; overall {rates.mean():.3f} (informational reference 0.75)")
    assert ok


def test_c10_determinism(experiment, verdict):
    cfg, arms, _ = experiment
    base, masr = run_seed(cfg, SEEDS[0])
    first_base, first_masr = arms[SEEDS[0]]
    same = ("\n".join(base.lines) == "\n".join(first_base.lines)
            and "\n".join(masr.lines) == "\n".join(first_masr.lines))
    same_report = base.report.confusion.tolist() == first_base.report.confusion.tolist() and \
        masr.report.confusion.tolist() == first_masr.report.confusion.tolist()
    ok = same and same_report
    verdict(10, ok, f"seed {SEEDS[0]} rerun: metrics logs byte-identical {same}, probe confusion identical {same_report}")
    assert ok
