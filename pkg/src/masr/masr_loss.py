"""Metadata-aware hard-triplet objective.

For stream ``j`` every utterance embedding ``h`` is projected to a unit
vector ``q``. Triplet members are *selected* on the concatenation
``p = [q ; alpha * e]`` with the fixed metadata encoding ``e`` (farthest
same-label, nearest different-label), while the hinge itself is evaluated on
``q``. Selection is a constant for differentiation.
"""

import math
from dataclasses import dataclass

import numpy as np

SKIP_MISSING = "missing_label"
SKIP_NO_POSITIVE = "empty_positive"
SKIP_NO_NEGATIVE = "empty_negative"


@dataclass(frozen=True)
class StreamConfig:
    name: str
    kind: str = "language"
    alpha: float = 1.0
    lam: float = 16.0
    gamma: float = 0.5
    dim: int = None  # projection size; None means "same as the encoding"
    source: str = None
    table: str = None
    category: str = "syntactic"
    text_dim: int = 16
    loss_on_p: bool = False

    def __post_init__(self):
        for key in ("alpha", "lam", "gamma"):
            value = getattr(self, key)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"stream '{self.name}': {key} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class TripletSelection:
    anchor: int
    k_plus: int = None
    k_minus: int = None
    skipped: str = None


def cosine_distance(a, b):
    """1 - cos(a, b); zero-norm inputs are an error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def project(h, w, b):
    """Affine map followed by l2 normalisation, row-wise for a batch ``h``.

    Returns ``(q, norms)``; ``norms`` are the pre-normalisation lengths
    needed by :func:`project_backward`.
    """
    u = h @ w + b
    norms = np.sqrt((u * u).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("projection produced a zero vector; cannot normalise")
    return u / norms, norms


def project_backward(dq, q, norms, h, w):
    """Gradients of the weights, bias and input through :func:`project`."""
    du = (dq - q * (q * dq).sum(axis=-1, keepdims=True)) / norms
    return {"w": h.T @ du, "b": du.sum(axis=0), "h": du @ w.T}


def build_sets(labels):
    """Per-anchor (positives, negatives) index lists; ``None`` for unlabelled anchors.

    The anchor itself is never its own positive, and unlabelled items join
    neither set.
    """
    B = len(labels)
    if B < 2:
        raise ValueError("mining needs a batch of at least 2")
    sets = []
    for i, li in enumerate(labels):
        if li is None:
            sets.append(None)
            continue
        plus = [k for k in range(B) if k != i and labels[k] is not None and labels[k] == li]
        minus = [k for k in range(B) if labels[k] is not None and labels[k] != li]
        sets.append((plus, minus))
    return sets


def mining_distances(q, e=None, alpha=0.0):
    """Pairwise cosine distances of ``p = [q ; alpha e]``, computed blockwise.

    Each block contributes its own dot products and squared norms, so
    ``alpha = 0`` reproduces the q-only distances bit for bit and duplicate
    rows always yield identical distances.
    """
    q = np.asarray(q, dtype=np.float64)
    dots = (q[:, None, :] * q[None, :, :]).sum(axis=2)
    sq = (q * q).sum(axis=1)
    if e is not None:
        e = np.asarray(e, dtype=np.float64)
        a2 = float(alpha) * float(alpha)
        dots = dots + a2 * (e[:, None, :] * e[None, :, :]).sum(axis=2)
        sq = sq + a2 * (e * e).sum(axis=1)
    return 1.0 - dots / np.sqrt(sq[:, None] * sq[None, :])


def select(dist, sets):
    """Hard selection from a distance matrix; ties go to the lowest index."""
    out = []
    for i, s in enumerate(sets):
        if s is None:
            out.append(TripletSelection(i, skipped=SKIP_MISSING))
            continue
        plus, minus = s
        if not plus:
            out.append(TripletSelection(i, skipped=SKIP_NO_POSITIVE))
        elif not minus:
            out.append(TripletSelection(i, skipped=SKIP_NO_NEGATIVE))
        else:
            kp = plus[int(np.argmax(dist[i, plus]))]
            km = minus[int(np.argmin(dist[i, minus]))]
            out.append(TripletSelection(i, kp, km))
    return out


def mine(q, e, alpha, sets):
    return select(mining_distances(q, e, alpha), sets)


def selection_gaps(dist, sets, selections):
    """Smallest distance gap between each chosen member and its runner-up."""
    gaps = []
    for sel, s in zip(selections, sets):
        if sel.skipped is not None:
            continue
        plus, minus = s
        i = sel.anchor
        for members, chosen in ((plus, sel.k_plus), (minus, sel.k_minus)):
            others = [dist[i, k] for k in members if k != chosen]
            if others:
                gaps.append(float(np.min(np.abs(np.array(others) - dist[i, chosen]))))
    return min(gaps) if gaps else math.inf


def _cos_grads(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = np.dot(a, b) / (na * nb)
    da = -(b / (na * nb) - c * a / (na * na))
    db = -(a / (na * nb) - c * b / (nb * nb))
    return 1.0 - c, da, db


def triplet_loss(selections, vecs, gamma):
    """Summed hinge ``[gamma + d(v_i, v_k+) - d(v_i, v_k-)]_+`` and its gradient w.r.t. ``vecs``.

    Skipped anchors contribute nothing; the hinge gradient at exactly zero
    slack is taken as zero. Also returns the per-anchor slacks.
    """
    loss = 0.0
    grad = np.zeros_like(vecs)
    slacks = []
    for sel in selections:
        if sel.skipped is not None:
            continue
        i, kp, km = sel.anchor, sel.k_plus, sel.k_minus
        dp, gi_p, gp = _cos_grads(vecs[i], vecs[kp])
        dn, gi_n, gn = _cos_grads(vecs[i], vecs[km])
        slack = gamma + dp - dn
        slacks.append(float(slack))
        if slack > 0.0:
            loss += float(slack)
            grad[i] += gi_p - gi_n
            grad[kp] += gp
            grad[km] -= gn
    return loss, grad, slacks


def combined_loss(l_ssl, l_meta, lams):
    """``l_ssl + sum_j lam_j * l_meta[j]`` in stream order; non-finite terms are an error."""
    if not math.isfinite(l_ssl):
        raise FloatingPointError(f"non-finite L_SSL ({l_ssl})")
    total = float(l_ssl)
    for name, value in l_meta.items():
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite L_META[{name}] ({value})")
        total += float(lams[name]) * float(value)
    return total


def selection_change_rate(q, e, alpha, sets):
    """Fraction of mined anchors whose negative differs between p-based and q-only selection."""
    with_meta = mine(q, e, alpha, sets)
    q_only = mine(q, None, 0.0, sets)
    active = [(a, b) for a, b in zip(with_meta, q_only) if a.skipped is None]
    if not active:
        return 0.0
    return sum(a.k_minus != b.k_minus for a, b in active) / len(active)
