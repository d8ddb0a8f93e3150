"""Masked-prediction SSL objective with random-projection quantizer targets.

Frames are stacked ``S`` at a time; each stacked step is projected by a
fixed random matrix, l2-normalised and assigned to its nearest codebook row.
The encoder is a stack of context-window affine+tanh blocks and is trained to
predict those codes at masked steps.
"""

from dataclasses import dataclass

import numpy as np

from masr._rng import rng_for


@dataclass(frozen=True)
class Quantizer:
    projection: np.ndarray
    codebook: np.ndarray
    stack: int
    seed: int

    @property
    def size(self):
        return self.codebook.shape[0]


def make_quantizer(seed, mel_bins, stack, code_dim, vocab):
    """Fixed projection (Xavier-normal) and unit-norm codebook, regenerated bit-identically from the seed."""
    rng = rng_for(seed, "quantizer")
    in_dim = mel_bins * stack
    proj = rng.standard_normal((in_dim, code_dim)) * np.sqrt(2.0 / (in_dim + code_dim))
    book = rng.standard_normal((vocab, code_dim))
    book /= np.linalg.norm(book, axis=1, keepdims=True)
    proj.setflags(write=False)
    book.setflags(write=False)
    return Quantizer(projection=proj, codebook=book, stack=stack, seed=seed)


def stack_frames(features, stack):
    """(T, F) -> (floor(T/S), F*S); frames of one step are concatenated in time order."""
    T, F = features.shape
    if T < stack:
        raise ValueError(f"{T} frames cannot fill one stacked step of {stack}")
    n = T // stack
    return np.asarray(features[:n * stack]).reshape(n, stack * F)


def _unit_rows(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def quantize_targets(features, quantizer):
    """Codebook index per stacked step (lowest index wins ties).

    A stacked step that projects to the zero vector is left unnormalised and
    is therefore equidistant from every code, so it maps to code 0.
    """
    x = stack_frames(np.asarray(features, dtype=np.float64), quantizer.stack)
    y = _unit_rows(x @ quantizer.projection)
    diff = y[:, None, :] - quantizer.codebook[None, :, :]
    return np.argmin((diff * diff).sum(axis=2), axis=1)


@dataclass(frozen=True)
class MaskPlan:
    indices: np.ndarray
    steps: int
    prob: float
    span: int
    seed: int

    def as_bool(self):
        m = np.zeros(self.steps, dtype=bool)
        m[self.indices] = True
        return m


def make_mask(steps, prob, span, seed):
    """Each step starts a span with probability ``prob``; spans are clipped at the end."""
    if steps < 1:
        raise ValueError("a mask needs at least one step")
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"mask probability {prob} outside [0, 1]")
    starts = np.flatnonzero(rng_for(seed, "mask").random(steps) < prob)
    m = np.zeros(steps, dtype=bool)
    for s in starts:
        m[s:s + span] = True
    return MaskPlan(indices=np.flatnonzero(m), steps=steps, prob=prob, span=span, seed=seed)


@dataclass(frozen=True)
class EncoderConfig:
    mel_bins: int = 40
    stack: int = 2
    context: int = 1
    layers: int = 2
    dim: int = 64
    vocab: int = 64

    @property
    def input_dim(self):
        return self.mel_bins * self.stack

    @property
    def output_dim(self):
        return self.dim if self.layers > 0 else self.input_dim


def init_backbone(config, seed, dtype=np.float64):
    """Encoder blocks, mask embedding and SSL head, keyed by tensor name."""
    rng = rng_for(seed, "backbone-init")
    params = {}
    width = 2 * config.context + 1
    d_in = config.input_dim
    for layer in range(config.layers):
        fan_in, fan_out = width * d_in, config.dim
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"encoder.w{layer}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"encoder.b{layer}"] = np.zeros(fan_out)
        d_in = config.dim
    params["mask_embedding"] = rng.uniform(-0.1, 0.1, config.input_dim)
    params["head.w"] = rng.standard_normal((config.output_dim, config.vocab)) * 0.01
    params["head.b"] = np.zeros(config.vocab)
    return {k: v.astype(dtype) for k, v in params.items()}


def context_index(lengths, context):
    """Row indices of the +-context neighbours of every step; ``N`` marks zero padding."""
    N = int(sum(lengths))
    offsets = np.arange(-context, context + 1)
    out = np.empty((N, len(offsets)), dtype=np.intp)
    start = 0
    for n in lengths:
        local = np.arange(n)[:, None] + offsets[None, :]
        valid = (local >= 0) & (local < n)
        out[start:start + n] = np.where(valid, local + start, N)
        start += n
    return out


def _gather(h, ctx):
    padded = np.concatenate([h, np.zeros((1, h.shape[1]), dtype=h.dtype)])
    return padded[ctx].reshape(h.shape[0], -1)


def encoder_forward(x, masked, lengths, params, config):
    """Batched encoder over concatenated stacked steps.

    ``x`` is (N, F*S) for all utterances back to back, ``masked`` a boolean
    (N,) vector, ``lengths`` the per-utterance step counts. Returns Z and a
    cache for :func:`encoder_backward`.
    """
    h = np.where(masked[:, None], params["mask_embedding"][None, :], x)
    ctx = context_index(lengths, config.context)
    cache = {"ctx": ctx, "masked": masked, "inputs": [], "outputs": []}
    for layer in range(config.layers):
        g = _gather(h, ctx)
        h = np.tanh(g @ params[f"encoder.w{layer}"] + params[f"encoder.b{layer}"])
        cache["inputs"].append(g)
        cache["outputs"].append(h)
    return h, cache


def encoder_backward(dz, cache, params, config):
    grads = {}
    ctx = cache["ctx"]
    N = dz.shape[0]
    dh = dz
    for layer in reversed(range(config.layers)):
        y, g = cache["outputs"][layer], cache["inputs"][layer]
        dpre = dh * (1.0 - y * y)
        w = params[f"encoder.w{layer}"]
        grads[f"encoder.w{layer}"] = g.T @ dpre
        grads[f"encoder.b{layer}"] = dpre.sum(axis=0)
        dg = (dpre @ w.T).reshape(N, ctx.shape[1], -1)
        dpad = np.zeros((N + 1, dg.shape[2]), dtype=dz.dtype)
        for c in range(ctx.shape[1]):
            # Each column maps rows injectively except onto the pad row.
            dpad[ctx[:, c]] += dg[:, c]
        dh = dpad[:N]
    masked = cache["masked"]
    grads["mask_embedding"] = dh[masked].sum(axis=0)
    return grads


def encode(features, mask, params, config):
    """Frame representations (T_s, d_z) of a single utterance."""
    x = stack_frames(np.asarray(features, dtype=params["mask_embedding"].dtype), config.stack)
    if x.shape[1] != config.input_dim:
        raise ValueError(f"stacked input dim {x.shape[1]} != configured {config.input_dim}")
    masked = mask.as_bool() if mask is not None else np.zeros(len(x), dtype=bool)
    if len(masked) != len(x):
        raise ValueError(f"mask covers {len(masked)} steps, input has {len(x)}")
    z, _ = encoder_forward(x, masked, [len(x)], params, config)
    return z


def pool(z):
    """Average pooling over steps."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("cannot pool an empty representation")
    return z.mean(axis=0)


def segment_mean(z, lengths):
    """Mean of consecutive row segments, shape (len(lengths), d)."""
    bounds = np.cumsum([0] + list(lengths))
    return np.stack([z[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])


def segment_mean_backward(dh, lengths):
    return np.concatenate([np.repeat(dh[i:i + 1] / n, n, axis=0) for i, n in enumerate(lengths)])


def ssl_loss(z, targets, masked, head_w, head_b):
    """Mean cross-entropy of the code predictions at masked steps.

    Returns ``(loss, grads, empty)`` where ``grads`` holds ``z``, ``head.w``
    and ``head.b``. An empty mask gives loss 0, zero gradients and
    ``empty=True``.
    """
    targets = np.asarray(targets)
    masked = np.asarray(masked, dtype=bool)
    if len(targets) != z.shape[0] or len(masked) != z.shape[0]:
        raise ValueError("targets and mask must have one entry per step")
    grads = {"z": np.zeros_like(z), "head.w": np.zeros_like(head_w), "head.b": np.zeros_like(head_b)}
    rows = np.flatnonzero(masked)
    if len(rows) == 0:
        return 0.0, grads, True
    zm = z[rows]
    logits = zm @ head_w + head_b
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    t = targets[rows]
    n = len(rows)
    loss = float((lse - logits[np.arange(n), t]).sum() / n)
    dlogits = np.exp(logits - lse[:, None])
    dlogits[np.arange(n), t] -= 1.0
    dlogits /= n
    grads["head.w"] = zm.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    grads["z"][rows] = dlogits @ head_w.T
    return loss, grads, False
