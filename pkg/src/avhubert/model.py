"""The audio-visual masked-prediction network.

audio fbank -> per-frame layer norm -> linear           (d/2)
mouth frames -> linear -> relu -> temporal conv -> linear (d/2)
concat with sequence-level modality dropout -> [fused mask embedding]
-> sinusoidal positions -> pre-norm transformer blocks -> e_{1:T}
e -> cluster logits (masked prediction) | CTC logits (fine-tuning)

Everything operates on padded batches ``[B, T, ...]`` with a ``lengths``
vector; padded positions are excluded from attention and from every loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neuralcore as nc
from .features import FeatureSequence
from .neuralcore import Tensor

BOTH, AUDIO_ONLY, VISUAL_ONLY = 0, 1, 2
FUSE_MODES = {"both": BOTH, "audio-only": AUDIO_ONLY, "visual-only": VISUAL_ONLY}


class LossError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    attn_dropout: float = 0.0
    layerdrop: float = 0.1
    codebook_size: int = 20
    alpha: float = 0.0
    p_m: float = 0.5
    p_a: float = 0.5
    audio_dim: int = 104
    image_size: int = 16
    visual_hidden: int = 64
    conv_width: int = 5
    ctc_vocab: int = 0
    positions: bool = True

    def __post_init__(self):
        if self.dim % self.heads or self.dim % 2:
            raise ValueError(f"dim {self.dim} must be even and divisible by heads {self.heads}")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        for name in ("p_m", "p_a", "dropout", "attn_dropout", "layerdrop"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.conv_width % 2 == 0:
            raise ValueError("conv_width must be odd")


@dataclass
class Batch:
    """Padded model inputs for one step."""

    audio: np.ndarray  # [B, T, audio_dim]
    video: np.ndarray  # [B, T, H, W]
    lengths: np.ndarray  # [B]
    audio_flags: np.ndarray | None = None  # input-level audio mask  [B, T]
    visual_flags: np.ndarray | None = None  # learned-embedding video frames [B, T]
    feature_flags: np.ndarray | None = None  # fused-feature mask [B, T]
    uids: list[str] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        T = self.audio.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


def make_batch(audio_list, video_list, uids=None, audio_flags=None, visual_flags=None,
               feature_flags=None) -> Batch:
    """Pad per-utterance arrays into a :class:`Batch`."""
    B = len(audio_list)
    lengths = np.array([len(a) for a in audio_list])
    T = int(lengths.max())
    A = np.zeros((B, T, audio_list[0].shape[1]), dtype=audio_list[0].dtype)
    V = np.zeros((B, T) + video_list[0].shape[1:], dtype=video_list[0].dtype)
    for i, (a, v) in enumerate(zip(audio_list, video_list)):
        if len(a) != len(v):
            raise nc.ShapeError(f"audio length {len(a)} != video length {len(v)} for item {i}")
        A[i, : len(a)] = a
        V[i, : len(v)] = v

    def pad_flags(fl):
        if fl is None:
            return None
        out = np.zeros((B, T), dtype=bool)
        for i, f in enumerate(fl):
            out[i, : len(f)] = f
        return out

    return Batch(A, V, lengths, pad_flags(audio_flags), pad_flags(visual_flags),
                 pad_flags(feature_flags), list(uids or []))


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def sample_branches(n: int, p_m: float, p_a: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sequence modality choice: both w.p. p_m, else audio w.p. p_a, else video."""
    u = rng.random(n)
    v = rng.random(n)
    return np.where(u < p_m, BOTH, np.where(v < p_a, AUDIO_ONLY, VISUAL_ONLY))


def fuse(f_a: Tensor, f_v: Tensor, mode="both", p_m: float = 0.5, p_a: float = 0.5,
         seed=None) -> Tensor:
    """Channel concat with the dropped modality zeroed for the whole sequence.

    ``f_a``/``f_v`` are [B, T, d/2] or [T, d/2]. ``mode`` is ``train``
    (branches drawn per sequence with ``p_m``/``p_a`` from ``seed``), a forced
    mode name, or an explicit array of branch codes (one per sequence).
    """
    if f_a.shape[:-1] != f_v.shape[:-1]:
        raise nc.ShapeError(f"fuse: incompatible shapes {f_a.shape} and {f_v.shape}")
    n = f_a.shape[0] if f_a.ndim == 3 else 1
    if isinstance(mode, str):
        if mode == "train":
            br = sample_branches(n, p_m, p_a, np.random.default_rng(seed))
        elif mode in FUSE_MODES:
            br = np.full(n, FUSE_MODES[mode])
        else:
            raise ValueError(f"unknown fuse mode {mode!r}")
    else:
        br = np.asarray(mode).reshape(-1)
    shape = (-1,) + (1,) * (f_a.ndim - 1) if f_a.ndim == 3 else (1,) * f_a.ndim
    keep_a = (br != VISUAL_ONLY).astype(f_a.data.dtype).reshape(shape)
    keep_v = (br != AUDIO_ONLY).astype(f_v.data.dtype).reshape(shape)
    return nc.concat([nc.mul(f_a, keep_a), nc.mul(f_v, keep_v)], axis=-1)


class AVHubertModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.training = True
        rng = np.random.default_rng([seed, 11])
        d, h = cfg.dim, cfg.dim // 2
        px = cfg.image_size * cfg.image_size
        p: dict[str, Tensor] = {}

        def lin(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            p[name + ".w"] = nc.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True)
            p[name + ".b"] = nc.Tensor(np.zeros(fan_out), True)

        lin("audio", cfg.audio_dim, h)
        p["audio.mask_emb"] = nc.Tensor(rng.normal(0, 1, cfg.audio_dim), True)
        lin("visual.in", px, cfg.visual_hidden)
        p["visual.conv"] = nc.Tensor(rng.normal(0, 1 / np.sqrt(cfg.conv_width),
                                                (cfg.conv_width, cfg.visual_hidden)), True)
        lin("visual.out", cfg.visual_hidden, h)
        p["visual.mask_emb"] = nc.Tensor(rng.normal(0, 1, px), True)
        p["fused.mask_emb"] = nc.Tensor(rng.normal(0, 0.5, d), True)
        for i in range(cfg.layers):
            pre = f"blk{i}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = nc.Tensor(np.ones(d), True)
                p[pre + ln + ".b"] = nc.Tensor(np.zeros(d), True)
            for m in ("q", "k", "v", "o"):
                lin(pre + "attn." + m, d, d)
            lin(pre + "ffn.1", d, cfg.ffn_dim)
            lin(pre + "ffn.2", cfg.ffn_dim, d)
        lin("proj", d, cfg.codebook_size)
        self.params = p
        if cfg.ctc_vocab:
            self.add_ctc_head(cfg.ctc_vocab, seed)

    # -- bookkeeping

    def add_ctc_head(self, vocab: int, seed: int = 0) -> None:
        """Attach a fresh [d x (vocab + 1)] CTC projection; the blank is the last column."""
        rng = np.random.default_rng([seed, 13])
        d = self.cfg.dim
        bound = 1.0 / np.sqrt(d)
        self.params["ctc.w"] = nc.Tensor(rng.uniform(-bound, bound, (d, vocab + 1)), True)
        self.params["ctc.b"] = nc.Tensor(np.zeros(vocab + 1), True)
        self.cfg.ctc_vocab = vocab

    @property
    def blank(self) -> int:
        return self.cfg.ctc_vocab

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith(("proj.", "ctc."))]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, v in state.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {k}")
                continue
            if self.params[k].shape != v.shape:
                raise nc.ShapeError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> "AVHubertModel":
        self.training = mode
        return self

    def eval(self) -> "AVHubertModel":
        return self.train(False)

    def header(self) -> dict:
        return {"model": asdict(self.cfg)}

    # -- encoders

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return nc.matmul(x, self.params[name + ".w"]) + self.params[name + ".b"]

    def encode_audio(self, audio, flags=None) -> Tensor:
        """[.., T, audio_dim] -> [.., T, d/2]; flagged frames use the audio mask embedding."""
        audio = np.asarray(audio)
        if audio.shape[-1] != self.cfg.audio_dim:
            raise nc.ShapeError(f"encode_audio: expected last dim {self.cfg.audio_dim}, got {audio.shape}")
        x = nc.layer_norm(nc.Tensor(audio))
        if flags is not None and np.any(flags):
            x = nc.where(np.asarray(flags)[..., None], self.params["audio.mask_emb"], x)
        return self._lin(x, "audio")

    def encode_visual(self, frames, lengths=None, flags=None) -> Tensor:
        """[B, T, H, W] (or [T, H, W]) -> [B, T, d/2]."""
        frames = np.asarray(frames)
        single = frames.ndim == 3
        if single:
            frames = frames[None]
        B, T, H, W = frames.shape
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise nc.ShapeError(f"encode_visual: expected {self.cfg.image_size}px frames, got {H}x{W}")
        # per-frame normalisation centres the pixels; without it most units of
        # the first layer are pushed into the dead region during pre-training
        x = nc.layer_norm(nc.Tensor(frames.reshape(B, T, H * W)))
        if flags is not None and np.any(flags):
            fl = np.asarray(flags).reshape(B, T, 1)
            x = nc.where(fl, self.params["visual.mask_emb"], x)
        h = nc.gelu(self._lin(x, "visual.in"))
        if lengths is not None:
            valid = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(h.data.dtype)
            h = nc.mul(h, valid[..., None])
        h = nc.depthwise_conv1d(h, self.params["visual.conv"])
        out = self._lin(h, "visual.out")
        return nc.reshape(out, (T, -1)) if single else out

    # -- transformer

    def _block(self, x: Tensor, i: int, key_bias: np.ndarray, rng) -> Tensor:
        cfg = self.cfg
        pre = f"blk{i}."
        B, T, d = x.shape
        nh, dh = cfg.heads, d // cfg.heads
        drop = cfg.dropout if self.training else 0.0
        h = nc.layer_norm(x) * self.params[pre + "ln1.g"] + self.params[pre + "ln1.b"]

        def heads(t):
            return nc.transpose(nc.reshape(t, (B, T, nh, dh)), (0, 2, 1, 3))

        q = heads(self._lin(h, pre + "attn.q"))
        k = heads(self._lin(h, pre + "attn.k"))
        v = heads(self._lin(h, pre + "attn.v"))
        scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = nc.softmax(scores + key_bias, axis=-1)
        if self.training and cfg.attn_dropout:
            att = nc.dropout(att, cfg.attn_dropout, rng)
        ctx = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        x = x + nc.dropout(self._lin(ctx, pre + "attn.o"), drop, rng, self.training)
        h = nc.layer_norm(x) * self.params[pre + "ln2.g"] + self.params[pre + "ln2.b"]
        h = self._lin(nc.gelu(self._lin(h, pre + "ffn.1")), pre + "ffn.2")
        return x + nc.dropout(h, drop, rng, self.training)

    def transformer_forward(self, f_av: Tensor, lengths=None, feature_flags=None, rng=None,
                            upto: int | None = None) -> Tensor:
        """Contextualise [B, T, d] fused features; returns the output of block ``upto``."""
        B, T, d = f_av.shape
        if self.training and rng is None and (self.cfg.dropout or self.cfg.layerdrop):
            raise ValueError("training-mode forward needs an rng for dropout/layer drop")
        x = f_av
        if feature_flags is not None and np.any(feature_flags):
            x = nc.where(np.asarray(feature_flags)[..., None], self.params["fused.mask_emb"], x)
        if self.cfg.positions:
            x = x + sinusoidal_positions(T, d).astype(x.data.dtype)
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        key_bias = np.where(np.arange(T)[None, :] < lengths[:, None], 0.0, -1e9)
        key_bias = key_bias[:, None, None, :].astype(x.data.dtype)
        n = self.cfg.layers if upto is None else upto
        for i in range(n):
            if self.training and self.cfg.layerdrop and rng.random() < self.cfg.layerdrop:
                continue
            x = self._block(x, i, key_bias, rng)
        return x

    # -- heads and losses

    def predict_clusters(self, e: Tensor) -> Tensor:
        return nc.log_softmax(self._lin(e, "proj"), axis=-1)

    def ctc_logits(self, e: Tensor) -> Tensor:
        if "ctc.w" not in self.params:
            raise KeyError("model has no CTC head; call add_ctc_head first")
        return self._lin(e, "ctc")

    def encode(self, batch: Batch, branches, rng=None, upto=None) -> Tensor:
        f_a = self.encode_audio(batch.audio, batch.audio_flags)
        f_v = self.encode_visual(batch.video, batch.lengths, batch.visual_flags)
        f_av = fuse(f_a, f_v, branches)
        return self.transformer_forward(f_av, batch.lengths, batch.feature_flags, rng, upto)

    def forward(self, batch: Batch, mode: str = "train", rng=None) -> Tensor:
        """Contextual features e for the batch.

        ``mode`` is ``train`` (sample branches with p_m/p_a) or one of
        ``both``/``audio-only``/``visual-only``.
        """
        B = len(batch.lengths)
        if mode == "train":
            branches = sample_branches(B, self.cfg.p_m, self.cfg.p_a, rng)
        else:
            branches = np.full(B, FUSE_MODES[mode])
        return self.encode(batch, branches, rng)


def masked_loss(logp: Tensor, z, mask_a, mask_v=None, alpha: float = 0.0, valid=None) -> Tensor:
    """Masked cluster-prediction loss, averaged over contributing frames.

    Frames in ``mask_a | mask_v`` contribute ``-log p_t(z_t)``; the rest
    contribute ``alpha`` times that and count towards the average only when
    ``alpha > 0``. Padded frames (``valid`` false) never contribute.
    """
    z = np.asarray(z)
    masked = np.asarray(mask_a, dtype=bool)
    if mask_v is not None:
        masked = masked | np.asarray(mask_v, dtype=bool)
    valid = np.ones_like(masked) if valid is None else np.asarray(valid, dtype=bool)
    if z.shape != masked.shape or logp.shape[:-1] != z.shape:
        raise nc.ShapeError(f"masked_loss: logp {logp.shape}, targets {z.shape}, mask {masked.shape}")
    if z[valid].size and (z[valid].min() < 0 or z[valid].max() >= logp.shape[-1]):
        raise LossError("targets outside codebook")
    m = masked & valid
    u = ~masked & valid
    count = m.sum() + (u.sum() if alpha > 0 else 0)
    if count == 0:
        raise LossError("no contributing frames in batch")
    w = m.astype(logp.data.dtype) + alpha * u.astype(logp.data.dtype)
    return nc.scale(nc.nll_from_log_softmax(logp, np.where(valid, z, 0), w), 1.0 / count)


# -- CTC


def _lse(a, b):
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = m + np.log1p(np.exp(-np.abs(a - b)))
    return np.where(np.isneginf(m), -np.inf, out)


def ctc_min_frames(target) -> int:
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _ctc_tables(lp: np.ndarray, targets, lengths, blank: int):
    """Log-space forward/backward tables over blank-interleaved targets.

    lp: [B, T, C] log-probabilities. Returns alpha, beta [B, T, S], ext [B, S],
    S_b and per-sequence log-likelihood.
    """
    B, T, _ = lp.shape
    L = max(max(len(t) for t in targets), 1)
    S = 2 * L + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    S_b = np.zeros(B, dtype=np.int64)
    for b, t in enumerate(targets):
        ext[b, 1 : 2 * len(t) : 2] = t
        S_b[b] = 2 * len(t) + 1
    s_idx = np.arange(S)
    in_range = s_idx[None, :] < S_b[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(in_range[:, None, :], emit, -np.inf)
    ninf = np.full((B, 1), -np.inf)

    alpha = np.full((B, T, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = np.where(S_b > 1, emit[:, 0, 1], -np.inf)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a = _lse(prev, np.concatenate([ninf, prev[:, :-1]], 1))
        a = _lse(a, np.where(skip, np.concatenate([ninf, ninf, prev[:, :-2]], 1), -np.inf))
        alpha[:, t] = a + emit[:, t]

    beta = np.full((B, T, S), -np.inf)
    last = np.asarray(lengths) - 1
    bi = np.arange(B)
    beta[bi, last, S_b - 1] = emit[bi, last, S_b - 1]
    beta[bi, last, S_b - 2] = np.where(S_b > 1, emit[bi, last, S_b - 2], -np.inf)
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        bb = _lse(nxt, np.concatenate([nxt[:, 1:], ninf], 1))
        bb = _lse(bb, np.where(skip_next, np.concatenate([nxt[:, 2:], ninf, ninf], 1), -np.inf))
        active = (t < last)[:, None]
        beta[:, t] = np.where(active, bb + emit[:, t], beta[:, t])
    end = alpha[bi, last]
    ll = _lse(end[bi, S_b - 1], np.where(S_b > 1, end[bi, np.maximum(S_b - 2, 0)], -np.inf))
    return alpha, beta, ext, ll


def ctc_loss_batch(logp: Tensor, targets, lengths, blank: int, reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood for a padded batch of log-probabilities.

    ``logp`` is [B, T, U+1] (log-softmax output); ``targets`` a list of token
    sequences. ``reduction`` is ``mean`` (over sequences) or ``sum``.
    """
    targets = [np.asarray(t, dtype=np.int64) for t in targets]
    lengths = np.asarray(lengths)
    for t, n in zip(targets, lengths):
        if len(t) and (t.min() < 0 or t.max() >= blank):
            raise LossError(f"target tokens must be in [0, {blank})")
        if n < max(ctc_min_frames(t), 1):
            raise LossError(f"{n} frames cannot emit a {len(t)}-token target")
    lp = logp.data.astype(np.float64)
    B, T, C = lp.shape
    alpha, beta, ext, ll = _ctc_tables(lp, targets, lengths, blank)
    if not np.all(np.isfinite(ll)):
        raise LossError("target is infeasible for the given lengths")
    w = 1.0 / B if reduction == "mean" else 1.0
    out = np.asarray(-ll.sum() * w, dtype=logp.data.dtype)

    def back(g):
        emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], alpha.shape), axis=2)
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - emit - ll[:, None, None])
        occ = np.nan_to_num(occ)
        grad = np.zeros((B, T, C))
        bidx = np.arange(B)[:, None, None]
        tidx = np.arange(T)[None, :, None]
        np.add.at(grad, (bidx, tidx, np.broadcast_to(ext[:, None, :], alpha.shape)), occ)
        valid = (np.arange(T)[None, :] < lengths[:, None])[..., None]
        return ((-grad * valid * w * g).astype(logp.data.dtype),)

    return nc.custom(out, (logp,), back)


def ctc_loss(logits: Tensor, target, blank: int | None = None) -> Tensor:
    """Single-sequence CTC loss from raw [T, U+1] logits (blank = last column)."""
    if not isinstance(logits, Tensor):
        logits = nc.Tensor(logits)
    T, C = logits.shape
    blank = C - 1 if blank is None else blank
    logp = nc.log_softmax(nc.reshape(logits, (1, T, C)), axis=-1)
    return ctc_loss_batch(logp, [target], [T], blank)


# -- feature extraction


def extract_features(model: AVHubertModel, batch: Batch, layer: int) -> list[FeatureSequence]:
    """Block-``layer`` activations (1-based) with both modalities and no masking."""
    if not 1 <= layer <= model.cfg.layers:
        raise ValueError(f"layer must be in [1, {model.cfg.layers}], got {layer}")
    was = model.training
    model.eval()
    try:
        with nc.no_grad():
            plain = Batch(batch.audio, batch.video, batch.lengths, uids=batch.uids)
            e = model.encode(plain, np.full(len(batch.lengths), BOTH), None, upto=layer)
    finally:
        model.train(was)
    return [FeatureSequence(e.data[i, :n], 25, "model-layer") for i, n in enumerate(batch.lengths)]


def save_model(path, model: AVHubertModel, opt_state=None, extra: dict | None = None) -> None:
    header = model.header()
    header.update(extra or {})
    nc.save_checkpoint(path, model.state_dict(), header, opt_state)


def load_model(path, with_optimizer: bool = False):
    params, header, opt = nc.load_checkpoint(path)
    cfg = ModelConfig(**header["model"])
    model = AVHubertModel(cfg)
    nc.load_checkpoint(path, {k: v.shape for k, v in model.params.items()})
    model.load_state_dict(params)
    return (model, opt, header) if with_optimizer else model


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
