"""Frozen-encoder linear probe and language-ID metrics."""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from masr._rng import rng_for


class EvalError(ValueError):
    pass


@dataclass
class ProbeModel:
    classes: list
    mean: np.ndarray
    scale: np.ndarray
    w: np.ndarray
    b: np.ndarray
    steps: int
    lr: float

    def scores(self, h):
        logits = ((np.asarray(h) - self.mean) / self.scale) @ self.w + self.b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, h):
        return np.argmax(self.scores(h), axis=1)


def _ce(x, y, w, b):
    logits = x @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    n = len(y)
    loss = float((lse - logits[np.arange(n), y]).mean())
    d = np.exp(logits - lse[:, None])
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, x.T @ d, d.sum(axis=0)


def _pick_lr(x, y, w, b, trial_steps=20):
    # Largest power-of-two rate whose first steps decrease the loss monotonically.
    for k in range(4, -12, -1):
        lr = 2.0 ** k
        wt, bt = w.copy(), b.copy()
        prev = _ce(x, y, wt, bt)[0]
        ok = True
        for _ in range(trial_steps):
            loss, gw, gb = _ce(x, y, wt, bt)
            if loss > prev + 1e-12 or not np.isfinite(loss):
                ok = False
                break
            prev = loss
            wt -= lr * gw
            bt -= lr * gb
        if ok and _ce(x, y, wt, bt)[0] <= prev:
            return lr
    return 2.0 ** -12


def train_probe(h, labels, classes, seed=0, max_steps=5000, tol=1e-5, window=50):
    """Softmax regression on standardised embeddings by full-batch gradient descent.

    Stops once the loss improves by less than ``tol`` over ``window`` steps,
    or after ``max_steps``.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise EvalError("probe training needs at least two classes")
    mean = h.mean(axis=0)
    scale = h.std(axis=0)
    scale[scale == 0] = 1.0
    x = (h - mean) / scale
    rng = rng_for(seed, "probe-init")
    w = 0.01 * rng.standard_normal((x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    lr = _pick_lr(x, y, w, b)
    history = []
    step = 0
    for step in range(1, max_steps + 1):
        loss, gw, gb = _ce(x, y, w, b)
        history.append(loss)
        w -= lr * gw
        b -= lr * gb
        if len(history) > window and history[-window - 1] - history[-1] < tol:
            break
    return ProbeModel(classes=list(classes), mean=mean, scale=scale, w=w, b=b, steps=step, lr=lr)


def params_checksum(params):
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name]).tobytes())
    return digest.hexdigest()


def probe_encoder(model, train_feats, train_labels, classes, seed=0, **kw):
    """Embed with the frozen encoder and fit a probe; the encoder must come out untouched."""
    from masr.model import embed

    before = params_checksum(model.params)
    probe = train_probe(embed(model, train_feats), train_labels, classes, seed, **kw)
    if params_checksum(model.params) != before:
        raise EvalError("encoder parameters changed during probe training")
    return probe


# -- metrics -----------------------------------------------------------------

def confusion(predictions, labels, num_classes):
    """counts[i, j] = number of items of true class i predicted as j."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise EvalError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


def binary_eer(target, nontarget):
    """Equal error rate from a ROC sweep, linearly interpolated at the FAR/FRR crossing.

    An item is accepted when its score is >= the threshold. Identical scores
    for every item give 0.5.
    """
    target = np.sort(np.asarray(target, dtype=np.float64))
    nontarget = np.sort(np.asarray(nontarget, dtype=np.float64))
    if len(target) == 0 or len(nontarget) == 0:
        raise EvalError("EER needs both target and non-target scores")
    thresholds = np.append(np.unique(np.concatenate([target, nontarget])), np.inf)
    frr = np.searchsorted(target, thresholds, side="left") / len(target)
    far = 1.0 - np.searchsorted(nontarget, thresholds, side="left") / len(nontarget)
    diff = far - frr
    k = int(np.argmax(diff <= 0))  # diff goes from 1 to -1 and is non-increasing
    if diff[k] == 0 or k == 0:
        return float(far[k])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


@dataclass
class EvalReport:
    classes: list
    accuracy: float
    macro_f1: float
    eer: float
    per_class_accuracy: dict
    support: dict
    confusion: np.ndarray
    correct: np.ndarray
    labels: np.ndarray
    acc_overlap: float = None
    acc_nonoverlap: float = None

    def lines(self):
        yield json.dumps({"kind": "summary", "accuracy": self.accuracy, "macro_f1": self.macro_f1,
                          "eer": self.eer, "acc_overlap": self.acc_overlap,
                          "acc_nonoverlap": self.acc_nonoverlap, "n": int(len(self.labels))},
                         sort_keys=True)
        for c in self.classes:
            yield json.dumps({"kind": "class", "class": c, "support": self.support[c],
                              "accuracy": self.per_class_accuracy[c]}, sort_keys=True)

    def dump(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def dump_confusion_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["true\\pred"] + list(self.classes)) + "\n")
            for c, row in zip(self.classes, self.confusion):
                fh.write(",".join([c] + [str(int(v)) for v in row]) + "\n")


def metrics(predictions, scores, labels, classes):
    """Accuracy, macro-F1 over classes with support, and macro one-vs-rest EER."""
    if len(classes) == 0:
        raise EvalError("empty class list")
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise EvalError("empty test set")
    K = len(classes)
    cm = confusion(predictions, labels, K)
    correct = predictions == labels
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    f1s, eers = [], []
    per_class, sup = {}, {}
    for k, c in enumerate(classes):
        sup[c] = int(support[k])
        if support[k] == 0:
            per_class[c] = None
            continue
        tp = cm[k, k]
        per_class[c] = float(tp / support[k])
        f1s.append(0.0 if tp == 0 else 2.0 * tp / (support[k] + predicted[k]))
        if support[k] < len(labels):
            eers.append(binary_eer(scores[labels == k, k], scores[labels != k, k]))
    return EvalReport(classes=list(classes), accuracy=float(correct.mean()), macro_f1=float(np.mean(f1s)),
                      eer=float(np.mean(eers)) if eers else None, per_class_accuracy=per_class,
                      support=sup, confusion=cm, correct=correct, labels=labels)


def split_report(report, overlap):
    """Accuracy over items whose true class is (not) in ``overlap``; None for an empty side."""
    overlap = set(overlap)
    unknown = overlap - set(report.classes)
    if unknown:
        raise EvalError(f"overlap classes not in class list: {sorted(unknown)}")
    in_overlap = np.array([report.classes[k] in overlap for k in report.labels], dtype=bool)
    acc_o = float(report.correct[in_overlap].mean()) if in_overlap.any() else None
    acc_no = float(report.correct[~in_overlap].mean()) if (~in_overlap).any() else None
    report.acc_overlap, report.acc_nonoverlap = acc_o, acc_no
    return acc_o, acc_no


def subset_accuracy(report, subset):
    """Accuracy over items whose true class is in ``subset`` (predictions over all classes)."""
    keep = np.array([report.classes[k] in set(subset) for k in report.labels], dtype=bool)
    return float(report.correct[keep].mean()) if keep.any() else None
