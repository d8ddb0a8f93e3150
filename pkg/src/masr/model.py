"""Model state and the joint SSL + metadata forward/backward pass."""

from dataclasses import dataclass, field

import numpy as np

from masr import masr_loss as ml
from masr._rng import derive_seed, rng_for
from masr.metadata import StreamEncoder, char_table, load_langvec
from masr.ssl_backbone import (
    encoder_backward,
    encoder_forward,
    init_backbone,
    make_mask,
    make_quantizer,
    quantize_targets,
    segment_mean,
    segment_mean_backward,
    ssl_loss,
    stack_frames,
)


@dataclass
class Model:
    """Learnable tensors plus the fixed, seed-regenerated artifacts."""

    encoder: object
    streams: list
    stream_encoders: dict
    quantizer: object
    params: dict
    seed: int
    mask_prob: float
    mask_span: int
    char_seed: int = None

    @property
    def dtype(self):
        return self.params["mask_embedding"].dtype

    def stream(self, name):
        return next(s for s in self.streams if s.name == name)


def stream_dim(stream, encoder):
    return stream.dim if stream.dim is not None else encoder.dim


def build_stream_encoders(streams, seed, resolve=lambda p: p, tables=None):
    """StreamEncoder per stream; language tables are read from ``stream.table``."""
    tables = tables or {}
    out = {}
    for s in streams:
        if s.kind == "language":
            table = tables.get(s.name)
            if table is None:
                if s.table is None:
                    raise ValueError(f"stream '{s.name}' has no lang2vec table configured")
                table = load_langvec(resolve(s.table), s.category)
            out[s.name] = StreamEncoder("language", table)
        elif s.kind == "text":
            out[s.name] = StreamEncoder("text", char_table(derive_seed(seed, "chars"), s.text_dim))
        else:
            out[s.name] = StreamEncoder(s.kind)
    return out


def init_model(config, seed, streams=(), stream_encoders=None, dtype=np.float32,
               code_dim=16, mask_prob=0.1, mask_span=2):
    streams = list(streams)
    stream_encoders = stream_encoders or {}
    params = init_backbone(config, derive_seed(seed, "backbone"), np.float64)
    d_z = config.output_dim
    for s in streams:
        d_q = stream_dim(s, stream_encoders[s.name])
        rng = rng_for(seed, "projection", s.name)
        bound = np.sqrt(6.0 / (d_z + d_q))
        params[f"proj.{s.name}.w"] = rng.uniform(-bound, bound, (d_z, d_q))
        params[f"proj.{s.name}.b"] = np.zeros(d_q)
    params = {k: v.astype(dtype) for k, v in params.items()}
    quantizer = make_quantizer(derive_seed(seed, "quantizer"), config.mel_bins, config.stack,
                               code_dim, config.vocab)
    return Model(encoder=config, streams=streams, stream_encoders=stream_encoders,
                 quantizer=quantizer, params=params, seed=seed,
                 mask_prob=mask_prob, mask_span=mask_span, char_seed=derive_seed(seed, "chars"))


@dataclass
class PreparedBatch:
    x: np.ndarray
    lengths: list
    masked: np.ndarray
    targets: np.ndarray
    labels: dict
    encodings: dict
    ids: list = field(default_factory=list)


def prepare_batch(model, records, features, mask_seed, targets_cache=None):
    """Stack frames, draw masks, compute quantizer targets and metadata encodings.

    ``mask_seed`` together with each record id determines the mask, so the
    same (seed, step) always reproduces the same batch.
    """
    cfg = model.encoder
    xs, masks, targets = [], [], []
    for rec, feat in zip(records, features):
        x = stack_frames(np.asarray(feat, dtype=model.dtype), cfg.stack)
        if x.shape[1] != cfg.input_dim:
            raise ValueError(f"record {rec.id}: stacked dim {x.shape[1]} != {cfg.input_dim}")
        xs.append(x)
        masks.append(make_mask(len(x), model.mask_prob, model.mask_span,
                               derive_seed(mask_seed, rec.id)).as_bool())
        if targets_cache is not None and rec.id in targets_cache:
            targets.append(targets_cache[rec.id])
        else:
            t = quantize_targets(feat, model.quantizer)
            if targets_cache is not None:
                targets_cache[rec.id] = t
            targets.append(t)
    labels, encodings = {}, {}
    for s in model.streams:
        enc = model.stream_encoders[s.name]
        vecs = [enc.encode(r) for r in records]
        labels[s.name] = [enc.label(r) if v is not None else None for r, v in zip(records, vecs)]
        dim = enc.dim
        encodings[s.name] = np.stack([v if v is not None else np.zeros(dim) for v in vecs])
    return PreparedBatch(x=np.concatenate(xs), lengths=[len(x) for x in xs],
                         masked=np.concatenate(masks), targets=np.concatenate(targets),
                         labels=labels, encodings=encodings, ids=[r.id for r in records])


@dataclass
class LossReport:
    l_ssl: float
    l_meta: dict
    l_masr: float
    objective: float
    change_rate: dict
    selections: dict
    slacks: dict
    gaps: dict
    empty_mask: bool


def forward_backward(model, batch, lams=None, ssl_scale=1.0, frozen=None, need_grads=True):
    """Loss terms and gradients of ``ssl_scale * L_SSL + sum_j lams[j] * L_META^j``.

    ``lams`` maps stream name to weight; streams absent from it are not
    evaluated (``None`` means SSL only). ``frozen`` optionally fixes the
    triplet selections per stream, as used for finite differences.
    """
    p = model.params
    lams = lams or {}
    z, cache = encoder_forward(batch.x, batch.masked, batch.lengths, p, model.encoder)
    l_ssl, g_ssl, empty = ssl_loss(z, batch.targets, batch.masked, p["head.w"], p["head.b"])

    l_meta, rates, selections, slacks, gaps = {}, {}, {}, {}, {}
    grads = {k: np.zeros_like(v) for k, v in p.items()} if need_grads else None
    dh = None
    active = [s for s in model.streams if s.name in lams]
    if active:
        h = segment_mean(z, batch.lengths)
        dh = np.zeros_like(h)
        for s in active:
            w, b = p[f"proj.{s.name}.w"], p[f"proj.{s.name}.b"]
            q, norms = ml.project(h, w, b)
            e = batch.encodings[s.name]
            sets = ml.build_sets(batch.labels[s.name])
            dist = ml.mining_distances(q, e, s.alpha)
            sel = frozen[s.name] if frozen is not None else ml.select(dist, sets)
            if s.loss_on_p:
                vecs = np.concatenate([q, (s.alpha * e).astype(q.dtype)], axis=1)
            else:
                vecs = q
            loss, dvec, sl = ml.triplet_loss(sel, vecs, s.gamma)
            l_meta[s.name] = loss
            selections[s.name] = sel
            slacks[s.name] = sl
            gaps[s.name] = ml.selection_gaps(dist, sets, sel)
            rates[s.name] = ml.selection_change_rate(q, e, s.alpha, sets)
            if need_grads:
                dq = (lams[s.name] * dvec[:, :q.shape[1]]).astype(q.dtype)
                g = ml.project_backward(dq, q, norms, h, w)
                grads[f"proj.{s.name}.w"] = g["w"]
                grads[f"proj.{s.name}.b"] = g["b"]
                dh += g["h"]

    l_masr = ml.combined_loss(l_ssl, l_meta, lams)
    objective = ssl_scale * l_ssl + sum(lams[k] * v for k, v in l_meta.items())
    report = LossReport(l_ssl=l_ssl, l_meta=l_meta, l_masr=l_masr, objective=objective,
                        change_rate=rates, selections=selections, slacks=slacks, gaps=gaps,
                        empty_mask=empty)
    if not need_grads:
        return report, None

    dz = g_ssl["z"] * ssl_scale if ssl_scale != 1.0 else g_ssl["z"]
    if dh is not None:
        dz = dz + segment_mean_backward(dh, batch.lengths)
    grads.update(encoder_backward(dz, cache, p, model.encoder))
    grads["head.w"] = g_ssl["head.w"] * ssl_scale if ssl_scale != 1.0 else g_ssl["head.w"]
    grads["head.b"] = g_ssl["head.b"] * ssl_scale if ssl_scale != 1.0 else g_ssl["head.b"]
    return report, grads


def embed(model, features, chunk=64):
    """Pooled utterance embeddings (no masking), one row per feature matrix."""
    cfg = model.encoder
    out = []
    for start in range(0, len(features), chunk):
        xs = [stack_frames(np.asarray(f, dtype=model.dtype), cfg.stack) for f in features[start:start + chunk]]
        lengths = [len(x) for x in xs]
        z, _ = encoder_forward(np.concatenate(xs), np.zeros(sum(lengths), dtype=bool), lengths,
                               model.params, cfg)
        out.append(segment_mean(z, lengths))
    return np.concatenate(out).astype(np.float64)
