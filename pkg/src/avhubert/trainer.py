"""Pre-training alternation, fine-tuning and self-training.

One pre-training iteration = cluster features into frame targets, then train
masked prediction on them from a fresh initialisation. Iteration 1 clusters
MFCC (or HoG); later iterations cluster an intermediate layer of the previous
iteration's model. Every artifact lands in a run directory::

    run/manifest.json
    run/metrics.csv                    iteration,layer,K,purity,nmi,train_loss,val_loss
    run/iter{i}/codebook.avk targets.avt model.avp best.avp losses.csv

Randomness flows from one root seed through named sub-streams so changing one
of them (say, the masks) leaves the others untouched.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import clusterlab as cl
from . import decode_eval as de
from . import features as F
from . import masking as mk
from . import model as M
from . import neuralcore as nc
from .synthcorpus import Corpus

log = logging.getLogger(__name__)

STREAMS = {"init": 1, "batch": 2, "mask": 3, "dropout": 4, "cluster": 5, "val": 6}


class ConfigError(ValueError):
    pass


def stream(seed: int, name: str, *extra) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], *extra])


# ---------------------------------------------------------------- data


@dataclass
class Item:
    audio: np.ndarray  # [T, 104] stacked log filterbanks
    video: np.ndarray  # [T, H, W]
    labels: np.ndarray  # [T] phone ids (evaluation only)
    words: tuple[int, ...]
    phones: tuple[int, ...]  # lexicon phone sequence, the CTC target
    split: str

    @property
    def T(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    items: dict[str, Item]
    lexicon: list[tuple[int, ...]]
    n_phones: int
    _mfcc: dict = field(default_factory=dict, repr=False)
    _hog: dict = field(default_factory=dict, repr=False)
    _waves: dict = field(default_factory=dict, repr=False)
    _frames: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[str]:
        return [u for u, it in self.items.items() if it.split == name]

    def labels(self, uids) -> dict[str, np.ndarray]:
        return {u: self.items[u].labels for u in uids}

    def mfcc(self, uids) -> dict[str, np.ndarray]:
        for u in uids:
            if u not in self._mfcc:
                self._mfcc[u] = F.mfcc_frames(self._waves[u], self.items[u].T)
        return {u: self._mfcc[u] for u in uids}

    def hog(self, uids) -> dict[str, np.ndarray]:
        for u in uids:
            if u not in self._hog:
                self._hog[u] = F.hog(self._frames[u]).data
        return {u: self._hog[u] for u in uids}


def prepare(corpus: Corpus) -> Dataset:
    """Compute model inputs for every utterance of a corpus."""
    inv = corpus.inventory
    items, waves, frames = {}, {}, {}
    for rec in corpus.records:
        u = corpus.utterances[rec.uid]
        items[rec.uid] = Item(
            audio=F.audio_input_features(u.wave, u.T).astype(np.float32),
            video=u.frames.astype(np.float32),
            labels=np.asarray(u.phone_labels),
            words=tuple(u.word_seq),
            phones=tuple(inv.word_phones(u.word_seq)),
            split=rec.split,
        )
        waves[rec.uid] = u.wave
        frames[rec.uid] = u.frames
    return Dataset(items, [tuple(w) for w in inv.words], inv.n_phones, _waves=waves, _frames=frames)


def budget_batches(lengths: dict[str, int], budget: int, rng: np.random.Generator) -> list[list[str]]:
    """Group utterances so that ``len(batch) * max_T <= budget``.

    Utterances are shuffled, sorted by length inside windows of 64 to limit
    padding, packed greedily and the batch order shuffled again.
    """
    ids = list(lengths)
    too_long = [u for u in ids if lengths[u] > budget]
    if too_long:
        raise ConfigError(f"{len(too_long)} utterances exceed the frame budget {budget}")
    order = [ids[i] for i in rng.permutation(len(ids))]
    window = 64
    order = [u for k in range(0, len(order), window)
             for u in sorted(order[k : k + window], key=lambda u: lengths[u])]
    batches, cur, cur_max = [], [], 0
    for u in order:
        m = max(cur_max, lengths[u])
        if cur and (len(cur) + 1) * m > budget:
            batches.append(cur)
            cur, m = [], lengths[u]
        cur.append(u)
        cur_max = m
    if cur:
        batches.append(cur)
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_stream(lengths: dict[str, int], budget: int, rng):
    while True:
        yield from budget_batches(lengths, budget, rng)


# ---------------------------------------------------------------- configs


@dataclass
class MaskConfig:
    placement: str = "feature"  # "feature" | "input"
    audio_p: float = 0.08
    audio_l: int = 10
    visual_p: float = 0.06
    visual_l: int = 5
    visual_mode: str = "sub-seg"
    same_sequence: bool = True

    def __post_init__(self):
        if self.placement not in ("feature", "input"):
            raise ConfigError(f"masking placement must be feature or input, got {self.placement!r}")
        if self.visual_mode not in mk.VISUAL_MODES:
            raise ConfigError(f"unknown visual masking mode {self.visual_mode!r}")


@dataclass
class TrainConfig:
    steps: int = 1000
    peak_lr: float = 0.002
    warmup_fraction: float = 0.08
    frame_budget: int = 512
    val_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.frame_budget < 1 or self.val_every < 1:
            raise ConfigError("steps >= 0, frame_budget >= 1 and val_every >= 1 required")


@dataclass
class FinetuneConfig:
    steps: int = 1000
    peak_lr: float = 0.001
    warmup_fraction: float = 0.08
    frame_budget: int = 512
    freeze_fraction: float = 0.0
    val_every: int = 100
    beam: int = 0  # 0 = greedy decoding at evaluation

    def __post_init__(self):
        if not 0 <= self.freeze_fraction <= 1:
            raise ConfigError("freeze_fraction must be in [0, 1]")
        if self.steps < 0 or self.frame_budget < 1:
            raise ConfigError("steps >= 0 and frame_budget >= 1 required")


def default_layers(L: int, n: int) -> list[int]:
    """Clustering layer per iteration >= 2: ceil(0.75 L) then L."""
    return [math.ceil(0.75 * L)] + [L] * max(n - 2, 0) if n > 1 else []


def _arrow(name: str) -> str:
    return name.replace("→", "->").replace(" ", "")


# model kind -> (p_m, p_a)
MODEL_KINDS = {"AV": None, "V": (0.0, 0.0), "A": (0.0, 1.0)}
VARIANTS = {
    "AV/MFCC->AV": ("AV", "mfcc", "self"),
    "V/MFCC->V": ("V", "mfcc", "self"),
    "V/HoG->V": ("V", "hog", "self"),
    "AV/MFCC->A": ("AV", "mfcc", "A"),
    "V/MFCC->A": ("V", "mfcc", "A"),
    "audio-only": ("A", "mfcc", "self"),
    "A/MFCC->AV": ("A", "mfcc", "AV"),
}


def parse_variant(name: str) -> tuple[str, str, str]:
    key = _arrow(name)
    if key == "A/MFCC->A":
        key = "audio-only"
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
    return VARIANTS[key]


@dataclass
class IterationPlan:
    variant: str = "AV/MFCC->AV"
    n_iterations: int = 5
    K: list[int] = field(default_factory=lambda: [20, 20, 30, 40, 50])
    layers: list[int] | None = None  # clustering layer for iterations 2..n
    placement: list[str] | None = None  # masking placement per iteration
    steps: list[int] | None = None  # training steps per iteration
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    kmeans_iter: int = 50
    kmeans_restarts: int = 3
    cluster_cap: int = 200_000

    def __post_init__(self):
        parse_variant(self.variant)
        n = self.n_iterations
        if n < 1:
            raise ConfigError("n_iterations must be >= 1")
        if len(self.K) < n:
            raise ConfigError(f"K schedule has {len(self.K)} entries for {n} iterations")
        self.K = list(self.K[:n])
        if any(k < 2 for k in self.K):
            raise ConfigError("every K must be >= 2")
        if any(b < a for a, b in zip(self.K[1:], self.K[2:])):
            raise ConfigError("K schedule must be non-decreasing after iteration 2")
        if self.layers is None:
            self.layers = default_layers(self.model.layers, n)
        self.layers = list(self.layers[: n - 1])
        if len(self.layers) < n - 1 or any(not 1 <= l <= self.model.layers for l in self.layers):
            raise ConfigError(f"cluster layers {self.layers} must be in [1, {self.model.layers}]")
        if self.placement is None:
            self.placement = ["feature"] * (n - 1) + ["input"] if n == 5 else ["feature"] * n
        self.placement = list(self.placement[:n])
        if len(self.placement) < n or any(p not in ("feature", "input") for p in self.placement):
            raise ConfigError("placement must list feature/input for every iteration")
        if self.steps is None:
            self.steps = [self.train.steps] * n
        self.steps = list(self.steps[:n])
        if len(self.steps) < n:
            raise ConfigError("steps must cover every iteration")

    def model_config(self, kind: str | None = None) -> M.ModelConfig:
        kind = kind or parse_variant(self.variant)[0]
        probs = MODEL_KINDS[kind]
        cfg = replace(self.model)
        if probs is not None:
            cfg.p_m, cfg.p_a = probs
        return cfg


# ---------------------------------------------------------------- masked-prediction training


def _mask_batch(data: Dataset, uids, mcfg: MaskConfig, rng, video):
    """Sample masks for one batch; returns (batch, loss mask)."""
    audio_flags, visual_flags, feature_flags, loss_mask = [], [], [], []
    for i, u in enumerate(uids):
        T = data.items[u].T
        if mcfg.placement == "feature":
            plan = mk.sample_spans(T, mcfg.audio_p, mcfg.audio_l, rng.integers(2**63), "fused")
            feature_flags.append(plan.mask())
            loss_mask.append(plan.mask())
            audio_flags.append(np.zeros(T, bool))
            visual_flags.append(np.zeros(T, bool))
        else:
            pa = mk.sample_spans(T, mcfg.audio_p, mcfg.audio_l, rng.integers(2**63), "audio")
            pv = mk.sample_spans(T, mcfg.visual_p, mcfg.visual_l, rng.integers(2**63), "visual")
            if mcfg.same_sequence:
                imposter = data.items[u].video
            else:
                others = [w for w in uids if w != u] or [u]
                imposter = data.items[others[int(rng.integers(len(others)))]].video
            if mcfg.visual_mode == "sub-seg":
                pv = mk.sample_offsets(pv, len(imposter), mcfg.same_sequence, rng.integers(2**63),
                                       fallback=True)
            frames, vflags = mk.corrupt_visual(data.items[u].video, pv, imposter, mcfg.visual_mode,
                                               rng.integers(2**63))
            video[i] = frames
            audio_flags.append(pa.mask())
            visual_flags.append(vflags)
            feature_flags.append(np.zeros(T, bool))
            loss_mask.append(pa.mask() | pv.mask())
    return audio_flags, visual_flags, feature_flags, loss_mask


def _pad(rows, T, fill=0):
    out = np.full((len(rows), T), fill, dtype=np.asarray(rows[0]).dtype)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def masked_batch(data: Dataset, uids, targets: dict, mcfg: MaskConfig, rng):
    video = [data.items[u].video for u in uids]
    af, vf, ff, lm = _mask_batch(data, uids, mcfg, rng, video)
    batch = M.make_batch([data.items[u].audio for u in uids], video, uids, af, vf, ff)
    T = batch.audio.shape[1]
    return batch, _pad([targets[u] for u in uids], T), _pad(lm, T, False)


@dataclass
class TrainResult:
    model: M.AVHubertModel
    losses: list[float]
    val_losses: list[tuple[int, float]]
    best_state: dict
    best_step: int
    skipped: int = 0
    input_mode: str = ""

    @property
    def train_loss(self) -> float:
        tail = self.losses[-max(1, len(self.losses) // 10):]
        return float(np.mean(tail)) if tail else float("nan")

    @property
    def best_val(self) -> float:
        vals = [v for s, v in self.val_losses if s == self.best_step]
        return vals[0] if vals else float("nan")


def _val_mode(cfg: M.ModelConfig) -> str:
    if cfg.p_m > 0:
        return "both"
    return "audio-only" if cfg.p_a == 1 else "visual-only" if cfg.p_a == 0 else "both"


def masked_val_loss(model, data, uids, targets, mcfg, seed, budget) -> float:
    """Frame-weighted masked-prediction loss on a fixed, seeded validation pass."""
    if not uids:
        return float("nan")
    rng = stream(seed, "val")
    model.eval()
    tot = n = 0.0
    try:
        with nc.no_grad():
            for b in budget_batches({u: data.items[u].T for u in uids}, budget, stream(seed, "val", 1)):
                batch, z, lm = masked_batch(data, b, targets, mcfg, rng)
                lm &= batch.valid
                if not lm.any():
                    continue
                e = model.forward(batch, _val_mode(model.cfg))
                loss = M.masked_loss(model.predict_clusters(e), z, lm, None, model.cfg.alpha, batch.valid)
                k = lm.sum() if model.cfg.alpha == 0 else batch.valid.sum()
                tot += float(loss.data) * k
                n += k
    finally:
        model.train()
    return float(tot / n) if n else float("nan")


def pretrain_iteration(data: Dataset, targets: cl.ClusterTargets, model_cfg: M.ModelConfig,
                       train_cfg: TrainConfig, mask_cfg: MaskConfig, seed: int,
                       train_uids=None, val_uids=None, out_dir=None) -> TrainResult:
    """Train masked prediction on ``targets`` from a fresh model."""
    train_uids = list(train_uids if train_uids is not None else data.split("pretrain"))
    val_uids = list(val_uids if val_uids is not None else data.split("validation"))
    missing = [u for u in train_uids + val_uids if u not in targets.targets]
    if missing:
        raise ConfigError(f"targets missing for {len(missing)} utterances (e.g. {missing[0]})")
    if targets.K != model_cfg.codebook_size:
        model_cfg = replace(model_cfg, codebook_size=targets.K)
    model = M.AVHubertModel(model_cfg, seed=int(stream(seed, "init").integers(2**31)))
    sched = nc.LRSchedule(train_cfg.peak_lr, max(train_cfg.steps, 1), train_cfg.warmup_fraction)
    opt = nc.AdamState()
    batches = batch_stream({u: data.items[u].T for u in train_uids}, train_cfg.frame_budget,
                           stream(seed, "batch"))
    mrng, drng = stream(seed, "mask"), stream(seed, "dropout")
    z = targets.targets
    losses, vals, skipped = [], [], 0
    best_state, best_step, best_val = model.state_dict(), 0, math.inf
    for step in range(train_cfg.steps):
        uids = next(batches)
        batch, zt, lm = masked_batch(data, uids, z, mask_cfg, mrng)
        e = model.forward(batch, "train", drng)
        try:
            loss = M.masked_loss(model.predict_clusters(e), zt, lm, None, model_cfg.alpha, batch.valid)
        except M.LossError:
            skipped += 1
            log.info("step %d: no masked frames, batch skipped", step)
            continue
        model.zero_grad()
        loss.backward()
        nc.adam_step(model.params, opt, nc.lr_at(sched, step + 1))
        losses.append(float(loss.data))
        if (step + 1) % train_cfg.val_every == 0 or step + 1 == train_cfg.steps:
            v = masked_val_loss(model, data, val_uids, z, mask_cfg, seed, train_cfg.frame_budget)
            vals.append((step + 1, v))
            if v < best_val or not val_uids:
                best_val, best_step, best_state = v, step + 1, model.state_dict()
    res = TrainResult(model, losses, vals, best_state, best_step, skipped)
    if out_dir is not None:
        _save_train(Path(out_dir), res, opt)
    return res


def _save_train(out: Path, res: TrainResult, opt) -> None:
    out.mkdir(parents=True, exist_ok=True)
    M.save_model(out / "model.avp", res.model, opt, {"best_step": res.best_step})
    best = M.AVHubertModel(replace(res.model.cfg))
    best.load_state_dict(res.best_state)
    M.save_model(out / "best.avp", best, None, {"best_step": res.best_step})
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_loss"])
        vals = dict(res.val_losses)
        for i, l in enumerate(res.losses, 1):
            w.writerow([i, repr(l), repr(vals[i]) if i in vals else ""])


def best_model(res: TrainResult) -> M.AVHubertModel:
    m = M.AVHubertModel(replace(res.model.cfg))
    m.load_state_dict(res.best_state)
    return m


# ---------------------------------------------------------------- iterative pre-training


def layer_features(model: M.AVHubertModel, data: Dataset, uids, layer: int,
                   budget: int = 2048) -> dict[str, np.ndarray]:
    out = {}
    lengths = {u: data.items[u].T for u in uids}
    order = sorted(uids, key=lambda u: lengths[u])
    chunk: list[str] = []
    for u in order + [None]:
        if u is not None and (not chunk or (len(chunk) + 1) * lengths[u] <= budget):
            chunk.append(u)
            continue
        if chunk:
            b = M.make_batch([data.items[w].audio for w in chunk],
                             [data.items[w].video for w in chunk], chunk)
            for w, fs in zip(chunk, M.extract_features(model, b, layer)):
                out[w] = fs.data
        chunk = [u] if u is not None else []
    return {u: out[u] for u in uids}


def initial_targets(data: Dataset, feature: str, K: int, seed: int, uids=None, fit_ids=None,
                    plan: IterationPlan | None = None):
    """Iteration-1 targets from MFCC (100 Hz, majority-voted to 25 Hz) or HoG (25 Hz)."""
    uids = list(uids if uids is not None else data.split("pretrain") + data.split("validation"))
    plan = plan or IterationPlan(n_iterations=1)
    kw = dict(K=K, seed=int(stream(seed, "cluster", 1).integers(2**31)), cap=plan.cluster_cap,
              max_iter=plan.kmeans_iter, n_restarts=plan.kmeans_restarts, fit_ids=fit_ids)
    if feature == "mfcc":
        return cl.make_targets(data.mfcc(uids), rate=100, kind="mfcc39", normalize=True,
                               source={"iteration": 1, "from": "mfcc39"}, **kw)
    if feature == "hog":
        return cl.make_targets(data.hog(uids), rate=25, kind="hog", normalize=True,
                               source={"iteration": 1, "from": "hog"}, **kw)
    raise ConfigError(f"unknown initial feature {feature!r}")


@dataclass
class IterationRecord:
    iteration: int
    layer: int
    K: int
    purity: float
    nmi: float
    train_loss: float
    val_loss: float
    codebook: str
    targets: str
    checkpoint: str
    best_checkpoint: str
    provenance: dict


@dataclass
class RunRecord:
    run_dir: str
    variant: str
    seed: int
    iterations: list[IterationRecord] = field(default_factory=list)
    aux: dict = field(default_factory=dict)

    def metrics(self) -> list[dict]:
        keys = ["iteration", "layer", "K", "purity", "nmi", "train_loss", "val_loss"]
        return [{k: getattr(r, k) for k in keys} for r in self.iterations]

    def best_checkpoint(self, iteration: int | None = None) -> Path:
        rec = self.iterations[-1 if iteration is None else iteration - 1]
        return Path(self.run_dir) / rec.best_checkpoint

    def check(self) -> None:
        """Artifacts exist, metrics are finite and targets come from the previous iteration."""
        root = Path(self.run_dir)
        for r in self.iterations:
            for p in (r.codebook, r.targets, r.checkpoint, r.best_checkpoint):
                if not (root / p).exists():
                    raise FileNotFoundError(root / p)
            if not all(np.isfinite([r.purity, r.nmi])):
                raise ValueError(f"iteration {r.iteration}: non-finite cluster metrics")
            src = r.provenance
            if r.iteration == 1:
                assert src["from"] in ("mfcc39", "hog"), src
            else:
                assert src["iteration"] == r.iteration and src["source_iteration"] == r.iteration - 1, src

    def save(self) -> None:
        root = Path(self.run_dir)
        (root / "manifest.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        with open(root / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "layer", "K", "purity", "nmi", "train_loss", "val_loss"])
            for m in self.metrics():
                w.writerow([repr(v) if isinstance(v, float) else v for v in m.values()])


def _chain(data, plan: IterationPlan, seed: int, root: Path, kind: str, init_feature: str,
           target_source=None, n_train=None):
    """Run one model chain; ``target_source(i)`` supplies external targets for iteration i."""
    pre, val = data.split("pretrain"), data.split("validation")
    uids = pre + val
    labels = data.labels(pre)
    cfg = plan.model_config(kind)
    records, results = [], []
    n = plan.n_iterations if n_train is None else n_train
    for i in range(1, n + 1):
        it_dir = root / f"iter{i}"
        it_dir.mkdir(parents=True, exist_ok=True)
        K = plan.K[i - 1]
        layer = 0
        if target_source is not None and i > 1:
            targets, cb, layer = target_source(i)
        elif i == 1:
            targets, cb = initial_targets(data, init_feature, K, seed, uids, pre, plan)
        else:
            layer = plan.layers[i - 2]
            prev = best_model(results[-1])
            feats = layer_features(prev, data, uids, layer)
            targets, cb = cl.make_targets(
                feats, K, seed=int(stream(seed, "cluster", i).integers(2**31)), rate=25,
                kind="model-layer", cap=plan.cluster_cap, normalize=False,
                max_iter=plan.kmeans_iter, n_restarts=plan.kmeans_restarts, fit_ids=pre,
                source={"iteration": i, "source_iteration": i - 1, "layer": layer,
                        "from": str((root / f"iter{i - 1}" / "best.avp").relative_to(root.parent))})
        pur, nm = cl.target_quality(cl.ClusterTargets({u: targets.targets[u] for u in pre}, K,
                                                      targets.source), labels)
        cl.save_codebook(it_dir / "codebook.avk", cb)
        cl.save_targets(it_dir / "targets.avt", targets)
        mcfg = replace(plan.mask, placement=plan.placement[i - 1])
        tcfg = replace(plan.train, steps=plan.steps[i - 1])
        res = pretrain_iteration(data, targets, cfg, tcfg, mcfg, seed * 1000 + i, pre, val, it_dir)
        results.append(res)
        rel = it_dir.relative_to(root)
        records.append(IterationRecord(
            i, layer, K, pur, nm, res.train_loss, res.best_val, str(rel / "codebook.avk"),
            str(rel / "targets.avt"), str(rel / "model.avp"), str(rel / "best.avp"),
            dict(targets.source)))
        log.info("%s iter %d: K=%d purity=%.3f nmi=%.3f loss=%.3f", kind, i, K, pur, nm, res.train_loss)
    return records, results


def iterative_pretrain(data: Dataset, plan: IterationPlan, seed: int, out_dir) -> RunRecord:
    """Alternate clustering and masked prediction for ``plan.n_iterations`` iterations."""
    kind, init_feature, sub = parse_variant(plan.variant)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rec = RunRecord(str(root), _arrow(plan.variant), seed)
    source = None
    if sub != "self":
        # source-kind chain trained alongside; its iteration i-1 model provides targets for i
        aux = f"aux_{sub}"
        aux_plan = replace(plan, variant="audio-only" if sub == "A" else "AV/MFCC->AV")
        aux_recs, aux_res = _chain(data, aux_plan, seed, root / aux, sub, "mfcc",
                                   n_train=plan.n_iterations - 1)
        rec.aux[sub] = [asdict(r) for r in aux_recs]
        pre, val = data.split("pretrain"), data.split("validation")

        def source(i):
            layer = plan.layers[i - 2]
            feats = layer_features(best_model(aux_res[i - 2]), data, pre + val, layer)
            t, cb = cl.make_targets(
                feats, plan.K[i - 1], seed=int(stream(seed, "cluster", i).integers(2**31)),
                rate=25, kind="model-layer", cap=plan.cluster_cap, max_iter=plan.kmeans_iter,
                n_restarts=plan.kmeans_restarts, fit_ids=pre,
                source={"iteration": i, "source_iteration": i - 1, "layer": layer,
                        "from": f"{aux}/iter{i - 1}/best.avp"})
            return t, cb, layer

    rec.iterations, _ = _chain(data, plan, seed, root, kind, init_feature, source)
    rec.save()
    (root / "plan.json").write_text(json.dumps(asdict(plan), indent=1, sort_keys=True))
    rec.check()
    return rec


# ---------------------------------------------------------------- fine-tuning


INPUT_MODES = ("visual-only", "audio-only", "AV")


def _fuse_mode(input_mode: str) -> str:
    if input_mode not in INPUT_MODES:
        raise ConfigError(f"input mode must be one of {INPUT_MODES}, got {input_mode!r}")
    return "both" if input_mode == "AV" else input_mode


def _check_compatible(cfg: M.ModelConfig, input_mode: str) -> None:
    saw_audio = cfg.p_m > 0 or cfg.p_a > 0
    saw_video = cfg.p_m > 0 or cfg.p_a < 1
    if input_mode == "visual-only" and not saw_video:
        raise ConfigError("visual-only fine-tuning needs a model pre-trained with video input")
    if input_mode == "audio-only" and not saw_audio:
        raise ConfigError("audio-only fine-tuning needs a model pre-trained with audio input")
    if input_mode == "AV" and not (saw_audio and saw_video):
        raise ConfigError("AV fine-tuning needs a model pre-trained with both modalities")


def ctc_batch(data: Dataset, uids, targets):
    batch = M.make_batch([data.items[u].audio for u in uids], [data.items[u].video for u in uids], uids)
    return batch, [list(targets[u]) for u in uids]


def ctc_val_loss(model, data, uids, targets, mode, budget) -> float:
    if not uids:
        return float("nan")
    model.eval()
    tot = 0.0
    try:
        with nc.no_grad():
            for b in budget_batches({u: data.items[u].T for u in uids}, budget, np.random.default_rng(0)):
                batch, tg = ctc_batch(data, b, targets)
                logp = nc.log_softmax(model.ctc_logits(model.forward(batch, mode)))
                tot += float(M.ctc_loss_batch(logp, tg, batch.lengths, model.blank, "sum").data)
    finally:
        model.train()
    return tot / len(uids)


def finetune(checkpoint, data: Dataset, input_mode: str, ft_cfg: FinetuneConfig, seed: int,
             train_uids=None, val_uids=None, targets=None, model_cfg: M.ModelConfig | None = None,
             out_dir=None) -> TrainResult:
    """CTC fine-tuning on phone sequences.

    ``checkpoint`` is a path, a model, or None for the from-scratch baseline
    (then ``model_cfg`` gives the architecture). ``targets`` overrides the
    ground-truth phone sequences (used by self-training).
    """
    mode = _fuse_mode(input_mode)
    if checkpoint is None:
        if model_cfg is None:
            raise ConfigError("scratch fine-tuning needs model_cfg")
        model = M.AVHubertModel(replace(model_cfg), seed=int(stream(seed, "init").integers(2**31)))
    else:
        src = M.load_model(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
        _check_compatible(src.cfg, input_mode)
        model = M.AVHubertModel(replace(src.cfg))
        model.load_state_dict(src.state_dict())
    model.add_ctc_head(data.n_phones, seed)
    train_uids = list(train_uids if train_uids is not None else data.split("labeled"))
    val_uids = list(val_uids if val_uids is not None else data.split("validation"))
    if targets is None:
        targets = {u: data.items[u].phones for u in set(train_uids) | set(val_uids)}
    gt = {u: data.items[u].phones for u in val_uids}
    sched = nc.LRSchedule(ft_cfg.peak_lr, max(ft_cfg.steps, 1), ft_cfg.warmup_fraction)
    opt = nc.AdamState()
    batches = batch_stream({u: data.items[u].T for u in train_uids}, ft_cfg.frame_budget,
                           stream(seed, "batch"))
    drng = stream(seed, "dropout")
    head = ["ctc.w", "ctc.b"]
    frozen_until = int(round(ft_cfg.freeze_fraction * ft_cfg.steps))
    losses, vals = [], []
    best_state, best_step, best_val = model.state_dict(), 0, math.inf
    for step in range(ft_cfg.steps):
        batch, tg = ctc_batch(data, next(batches), targets)
        e = model.forward(batch, mode, drng)
        loss = M.ctc_loss_batch(nc.log_softmax(model.ctc_logits(e)), tg, batch.lengths, model.blank)
        model.zero_grad()
        loss.backward()
        names = head if step < frozen_until else None
        nc.adam_step(model.params, opt, nc.lr_at(sched, step + 1), names)
        losses.append(float(loss.data))
        if (step + 1) % ft_cfg.val_every == 0 or step + 1 == ft_cfg.steps:
            v = ctc_val_loss(model, data, val_uids, gt, mode, ft_cfg.frame_budget)
            vals.append((step + 1, v))
            if v < best_val or not val_uids:
                best_val, best_step, best_state = v, step + 1, model.state_dict()
    res = TrainResult(model, losses, vals, best_state, best_step, input_mode=input_mode)
    if out_dir is not None:
        _save_train(Path(out_dir), res, opt)
    return res


# ---------------------------------------------------------------- decoding and self-training


def transcribe(model: M.AVHubertModel, data: Dataset, uids, input_mode: str, beam: int = 0,
               budget: int = 2048) -> dict[str, list[int]]:
    """Decoded phone sequence per utterance (greedy when ``beam`` is 0)."""
    mode = _fuse_mode(input_mode)
    out = {}
    was = model.training
    model.eval()
    try:
        with nc.no_grad():
            for b in budget_batches({u: data.items[u].T for u in uids}, budget, np.random.default_rng(0)):
                batch, _ = ctc_batch(data, b, {u: () for u in b})
                logits = model.ctc_logits(model.forward(batch, mode)).data
                for i, u in enumerate(b):
                    x = logits[i, : batch.lengths[i]]
                    out[u] = de.greedy_decode(x) if beam == 0 else list(de.beam_decode(x, beam).tokens)
    finally:
        model.train(was)
    return {u: out[u] for u in uids}


def evaluate_wer(model, data: Dataset, uids, input_mode: str, beam: int = 0):
    """Corpus WER over lexicon words and the per-utterance decode rows."""
    hyps = transcribe(model, data, uids, input_mode, beam)
    rows = [(u, list(data.items[u].words), de.segment_words(hyps[u], data.lexicon)) for u in uids]
    return de.corpus_wer([(h, r) for _, r, h in rows]), rows


def self_train(finetuned, data: Dataset, unlabeled, labeled, pretrained, ft_cfg: FinetuneConfig,
               seed: int, input_mode: str = "visual-only", label_mode: str | None = None,
               labeler=None, val_uids=None, out_dir=None,
               model_cfg: M.ModelConfig | None = None) -> TrainResult:
    """Pseudo-label ``unlabeled`` with a fine-tuned model, then fine-tune
    ``pretrained`` on the pseudo-labelled plus the labelled utterances.

    The labelling model decodes greedily in ``label_mode`` (default: its own
    fine-tuning mode), so an audio recogniser can label data for a lip-reading
    model. ``labeler(uids) -> {uid: phones}`` replaces the model when given.
    """
    unlabeled, labeled = list(unlabeled), list(labeled)
    if not unlabeled:
        raise ConfigError("self-training needs unlabeled utterances")
    if labeler is None:
        if isinstance(finetuned, TrainResult):
            label_mode = label_mode or finetuned.input_mode
            finetuned = best_model(finetuned)
        elif isinstance(finetuned, (str, Path)):
            finetuned = M.load_model(finetuned)
        pseudo = transcribe(finetuned, data, unlabeled, label_mode or input_mode)
    else:
        pseudo = labeler(unlabeled)
    targets = {u: tuple(pseudo[u]) for u in unlabeled}
    val_uids = list(val_uids if val_uids is not None else data.split("validation"))
    targets.update({u: data.items[u].phones for u in labeled + val_uids})
    return finetune(pretrained, data, input_mode, ft_cfg, seed, unlabeled + labeled, val_uids,
                    targets, model_cfg=model_cfg, out_dir=out_dir)
