"""Command line entry point: ``masr {synth,pretrain,probe,diag-mining,gradcheck}``.

Hyperparameters live in the JSON config; flags only name paths, the root
seed and the thread count. Failures print one JSON line to stderr, e.g.
``{"error": "ConfigError", "message": "..."}``, and exit nonzero.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from masr import checkpoint as ckpt
from masr.config import ConfigError, RunConfig, load_config
from masr.datasets import BatchSchedule, FeatureFileError, FeatureStore, ManifestError, load_manifest

log = logging.getLogger("masr")

THREADS_ENV = "MASR_THREADS"
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------

def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig(base_dir=os.getcwd())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _records(cfg, manifest, which):
    """(records, store, tables) from a manifest, or the synthetic corpus when none is configured."""
    from masr.experiment import eval_spec, language_tables, synth_spec
    from masr.datasets import synthesize_corpus

    path = manifest or getattr(cfg.data, f"{which}_manifest")
    if path is not None:
        path = cfg.resolve(path) if manifest is None else path
        records = load_manifest(path)
        fcfg = cfg.features
        from masr.features import LogMelConfig

        lm = LogMelConfig(fcfg.frame_ms, fcfg.hop_ms, fcfg.n_mels, fcfg.floor)
        return records, FeatureStore(records, os.path.dirname(os.path.abspath(path)), lm), None
    spec = synth_spec(cfg)
    split_spec = spec if which == "train" else eval_spec(cfg, spec)
    records, feats = synthesize_corpus(split_spec, which)
    log.info("no %s manifest configured; using the in-memory synthetic corpus", which)
    return records, FeatureStore(records, preloaded=feats), language_tables(cfg, spec)


def _tables(cfg):
    """In-memory language tables when the config's stream tables are not on disk."""
    from masr.experiment import language_tables, synth_spec

    missing = [s for s in cfg.streams if s.kind == "language" and
               (s.table is None or not os.path.exists(cfg.resolve(s.table)))]
    if not missing:
        return None
    log.info("language table not found; using the synthetic table for seed %d", cfg.seed)
    return language_tables(cfg, synth_spec(cfg))


def _checkpoint_config(args):
    """Run config for a checkpoint; the seed defaults to the one it was trained with."""
    with open(args.checkpoint, "rb") as fh:
        _, seeds, stored_json, _ = ckpt.decode_checkpoint(fh.read())
    if args.config:
        cfg = load_config(args.config)
        cfg = cfg.replace(seed=args.seed if args.seed is not None else seeds["root"])
    else:
        from masr.config import from_dict

        cfg = from_dict(json.loads(stored_json), base_dir=os.getcwd())
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    return cfg


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    from masr.datasets import synthesize_corpus, write_corpus
    from masr.experiment import eval_spec, synth_spec
    from masr.metadata import write_langvec
    from masr.datasets import synthesize_langvec

    cfg = _config(args)
    out = _outdir(args.out)
    spec = synth_spec(cfg)
    train, train_feats = synthesize_corpus(spec, "train")
    evals, eval_feats = synthesize_corpus(eval_spec(cfg, spec), "eval")
    write_corpus(out, train, train_feats, "train.jsonl")
    write_corpus(out, evals, eval_feats, "eval.jsonl")
    s = cfg.data.synth
    write_langvec(os.path.join(out, "langvec.tsv"), synthesize_langvec(spec, s.langvec_dim, s.langvec_pair_cosine))
    run = cfg.replace(data__train_manifest="train.jsonl", data__eval_manifest="eval.jsonl",
                      streams=[{**dataclasses.asdict(st), "table": "langvec.tsv"} if st.kind == "language"
                               else dataclasses.asdict(st) for st in cfg.streams])
    _write_json(os.path.join(out, "config.json"), run.to_dict())
    print(json.dumps({"train": len(train), "eval": len(evals), "seed": cfg.seed, "out": out}, sort_keys=True))
    return 0


def cmd_pretrain(args):
    from masr.training import load_checkpoint, new_state, save_checkpoint, train

    cfg = _config(args) if not args.checkpoint else _checkpoint_config(args)
    out = _outdir(args.out)
    records, store, tables = _records(cfg, args.manifest, "train")
    tables = tables or _tables(cfg)
    metrics_path = os.path.join(out, "metrics.jsonl")
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, cfg, tables)
        # Keep the log prefix that precedes the checkpoint so a resumed run matches an uninterrupted one.
        kept = []
        if os.path.exists(metrics_path):
            with open(metrics_path, encoding="utf-8") as fh:
                kept = [line for line in fh if json.loads(line)["step"] < state.step]
        if len(kept) != state.step:
            raise CliError(f"metrics log has {len(kept)} lines before step {state.step}; cannot resume into {out}")
        with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(kept)
    else:
        state = new_state(cfg, tables)
        open(metrics_path, "w").close()

    t = cfg.training
    eval_data = None
    evals_path = os.path.join(out, "evals.jsonl")
    if t.eval_every > 0:
        eval_data = _records(cfg, None, "eval")[:2]
        if not args.checkpoint:
            open(evals_path, "w").close()

    def on_step(step, st, report):
        done = step + 1
        if t.checkpoint_every and done % t.checkpoint_every == 0:
            save_checkpoint(st, os.path.join(out, f"checkpoint-{done:06d}.ckpt"))
        if eval_data is not None and done % t.eval_every == 0:
            from masr.experiment import evaluate_probe, focus_languages
            from masr.evaluation import subset_accuracy

            rep, _ = evaluate_probe(st.model, eval_data[0], eval_data[1], cfg, cfg.seed)
            line = {"step": done, "accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "eer": rep.eer,
                    "focus_accuracy": subset_accuracy(rep, focus_languages(cfg))}
            with open(evals_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(line, sort_keys=True) + "\n")

    with open(metrics_path, "a", encoding="utf-8", newline="\n") as fh:
        train(state, records, store, log_fh=fh, on_step=on_step)
    save_checkpoint(state, os.path.join(out, "checkpoint.ckpt"))
    with open(metrics_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    from masr.plotting import plot_training

    plot_training(lines, os.path.join(out, "training.png"))
    last = json.loads(lines[-1]) if lines else {}
    print(json.dumps({"steps": state.step, "seed": cfg.seed, "config_hash": cfg.hash(),
                      "final": last}, sort_keys=True))
    return 0


def cmd_probe(args):
    from masr.evaluation import subset_accuracy
    from masr.experiment import evaluate_probe, focus_languages
    from masr.plotting import plot_confusion
    from masr.training import load_checkpoint

    cfg = _checkpoint_config(args)
    out = _outdir(args.out)
    records, store, tables = _records(cfg, args.manifest, "eval")
    state = load_checkpoint(args.checkpoint, cfg, tables or _tables(cfg))
    report, probe = evaluate_probe(state.model, records, store, cfg, cfg.seed)
    report.dump(os.path.join(out, "report.jsonl"))
    report.dump_confusion_csv(os.path.join(out, "confusion.csv"))
    plot_confusion(report, os.path.join(out, "confusion.png"))
    focus = [c for c in focus_languages(cfg) if c in report.classes]
    print(json.dumps({"accuracy": report.accuracy, "macro_f1": report.macro_f1, "eer": report.eer,
                      "acc_overlap": report.acc_overlap, "acc_nonoverlap": report.acc_nonoverlap,
                      "focus_accuracy": subset_accuracy(report, focus) if focus else None,
                      "probe_steps": probe.steps, "seed": cfg.seed}, sort_keys=True))
    return 0


def mining_diagnostics(model, records, store, config, batches):
    """Per-batch, per-stream selection-change rate and triplet statistics."""
    from masr._rng import derive_seed
    from masr.model import forward_backward, prepare_batch

    schedule = BatchSchedule(records, config.training.batch_size, config.seed, config.training.balance)
    lams = {s.name: s.lam for s in model.streams}
    rows = []
    for k in range(batches):
        batch = schedule[k]
        prepared = prepare_batch(model, batch.records, [store[i] for i in batch.ids],
                                 derive_seed(config.seed, "diag-mask", k))
        report, _ = forward_backward(model, prepared, lams, need_grads=False)
        for s in model.streams:
            sel = report.selections[s.name]
            active = [x for x in sel if x.skipped is None]
            slacks = np.array(report.slacks[s.name]) if report.slacks[s.name] else np.zeros(0)
            rows.append({
                "batch": k,
                "stream": s.name,
                "change_rate": report.change_rate[s.name],
                "active": len(active),
                "skipped": len(sel) - len(active),
                "violations": int((slacks > 0).sum()),
                "mean_slack": float(slacks.mean()) if len(slacks) else 0.0,
                "l_meta": report.l_meta[s.name],
            })
    return rows


def cmd_diag_mining(args):
    from masr.plotting import plot_change_rate
    from masr.training import load_checkpoint

    cfg = _checkpoint_config(args)
    out = _outdir(args.out)
    records, store, tables = _records(cfg, args.manifest, "train")
    state = load_checkpoint(args.checkpoint, cfg, tables or _tables(cfg))
    rows = mining_diagnostics(state.model, records, store, cfg, cfg.diag.batches)
    fields = ["batch", "stream", "change_rate", "active", "skipped", "violations", "mean_slack", "l_meta"]
    with open(os.path.join(out, "change_rate.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    summary = {}
    for s in cfg.streams:
        mine = [r for r in rows if r["stream"] == s.name]
        rates = [r["change_rate"] for r in mine]
        summary[s.name] = {"alpha": s.alpha, "batches": len(mine),
                           "mean_change_rate": float(np.mean(rates)) if rates else 0.0,
                           "mean_active": float(np.mean([r["active"] for r in mine])) if mine else 0.0,
                           "violation_rate": (sum(r["violations"] for r in mine)
                                              / max(1, sum(r["active"] for r in mine)))}
        plot_change_rate(rates, os.path.join(out, f"change_rate_{s.name}.png"))
    _write_json(os.path.join(out, "triplet_stats.json"), {"seed": cfg.seed, "streams": summary})
    print(json.dumps({"seed": cfg.seed, "streams": summary}, sort_keys=True))
    return 0


def cmd_gradcheck(args):
    from masr.training import gradcheck_suite

    cfg = _config(args)
    reports = gradcheck_suite(cfg)
    rows, failures = [], []
    for k, rep in reports:
        obj = rep.objective if isinstance(rep.objective, str) else f"meta:{rep.objective[1]}"
        for name in sorted(rep.errors):
            ok = rep.errors[name] <= rep.tolerance
            rows.append((k, obj, name, rep.errors[name], ok))
            if not ok:
                failures.append(f"instance {k} {obj} {name} ({rep.errors[name]:.3g})")
    if args.out:
        out = _outdir(args.out)
        with open(os.path.join(out, "gradcheck.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("instance,objective,tensor,max_rel_error,passed\n")
            for k, obj, name, err, ok in rows:
                fh.write(f"{k},{obj},{name},{err!r},{int(ok)}\n")
    worst = max((r[3] for r in rows), default=0.0)
    print(json.dumps({"instances": len(set(r[0] for r in rows)), "checks": len(rows), "max_rel_error": worst,
                      "tolerance": cfg.gradcheck.tolerance, "passed": not failures}, sort_keys=True))
    if failures:
        raise CliError("gradient check failed: " + "; ".join(failures[:10]))
    return 0


# -- entry point -------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="masr", description="Metadata-aware speech representation toolkit.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"BLAS/OpenMP threads (default: ${THREADS_ENV} or library default)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="run config (JSON); defaults apply when omitted")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the root seed")

    p = sub.add_parser("synth", help="write a synthetic corpus, lang2vec table and run config")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="two-phase pretraining; writes checkpoint, metrics and a plot")
    common(p)
    p.add_argument("--manifest", help="training manifest (overrides data.train_manifest)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe language ID on a frozen checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", help="evaluation manifest (overrides data.eval_manifest)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("diag-mining", help="per-batch selection-change rates and triplet statistics")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", help="manifest to batch (overrides data.train_manifest)")
    p.set_defaults(func=cmd_diag_mining)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--config", help="run config (JSON); defaults apply when omitted")
    p.add_argument("--out", help="optional directory for gradcheck.csv")
    p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from masr.evaluation import EvalError
    from masr.features import AudioError
    from masr.metadata import LangVecError
    from masr.training import GradCheckError, TrainingError

    try:
        threads = _thread_count(args)
        if threads is not None and threads < 1:
            raise CliError("--threads must be >= 1")
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        return _fail("ConfigError", exc, EXIT_USAGE)
    except (ManifestError, FeatureFileError, AudioError, LangVecError, ckpt.CheckpointError, EvalError,
            TrainingError, GradCheckError, CliError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FAILURE)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
