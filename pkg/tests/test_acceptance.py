"""Acceptance criteria 1-15.

Criteria 1-8 compare the implementation with independent brute-force
computations. Criteria 9-15 are trends measured end to end on the synthetic
corpus over three seeds; a trend passes when it holds for a majority of seeds.
Each test records a one-line verdict that is printed in the session summary.
"""

import itertools
import math
from collections import Counter, defaultdict
from fractions import Fraction

import numpy as np
import pytest

from avhubert import clusterlab as cl
from avhubert import decode_eval as de
from avhubert import masking as mk
from avhubert import model as M
from avhubert import neuralcore as nc
from avhubert import synthcorpus as sc
from avhubert import trainer as tr

# ---------------------------------------------------------------- oracle suite


def _collapse(path, blank):
    return tuple(k for k, _ in itertools.groupby(path) if k != blank)


def _log_softmax(x):
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


def _fd_grad(loss_fn, p, h=1e-5):
    g = np.zeros_like(p.data)
    flat, gf = p.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn().data)
        flat[i] = old - h
        down = float(loss_fn().data)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def test_c01_gradients(criterion):
    cfg = M.ModelConfig(dim=16, layers=2, heads=2, ffn_dim=32, image_size=4, visual_hidden=8,
                        audio_dim=6, codebook_size=5, dropout=0.0, layerdrop=0.0, alpha=0.3)
    rng = np.random.default_rng(11)
    worst = {}
    with nc.precision("f64"):
        model = M.AVHubertModel(cfg, seed=4)
        model.add_ctc_head(3, seed=4)
        lengths = [6, 4]
        batch = M.make_batch([rng.normal(size=(n, 6)) for n in lengths],
                             [rng.random((n, 4, 4)) for n in lengths], ["a", "b"],
                             feature_flags=[rng.random(n) < 0.4 for n in lengths])
        z = rng.integers(0, 5, size=(2, 6))
        mask_a = np.zeros((2, 6), bool)
        mask_a[:, 1:4] = True
        mask_v = np.zeros((2, 6), bool)
        mask_v[0, 4] = True

        def pretrain_loss():
            e = model.forward(batch, "both")
            return M.masked_loss(model.predict_clusters(e), z, mask_a, mask_v, cfg.alpha, batch.valid)

        def ctc_loss():
            e = model.forward(batch, "both")
            return M.ctc_loss_batch(nc.log_softmax(model.ctc_logits(e)), [[0, 1, 1], [2]],
                                    batch.lengths, model.blank)

        for name, fn in (("masked", pretrain_loss), ("ctc", ctc_loss)):
            model.zero_grad()
            fn().backward()
            for k, p in model.params.items():
                a = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                n = _fd_grad(fn, p)
                err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
                worst[name] = max(worst.get(name, 0.0), float(err.max()))
    ok = max(worst.values()) < 1e-4
    criterion(1, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_c02_ctc_enumeration(criterion):
    rng = np.random.default_rng(0)
    tables = {}
    worst, n = 0.0, 0
    with nc.precision("f64"):
        while n < 1000:
            T, U = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            L = int(rng.integers(0, T + 1))
            target = tuple(int(x) for x in rng.integers(0, U, L))
            if L + sum(a == b for a, b in zip(target, target[1:])) > T:
                continue
            if (T, U) not in tables:
                paths = np.array(list(itertools.product(range(U + 1), repeat=T)))
                groups = defaultdict(list)
                for i, p in enumerate(paths):
                    groups[_collapse(p, U)].append(i)
                tables[T, U] = paths, groups
            paths, groups = tables[T, U]
            logits = rng.normal(size=(T, U + 1)) * 2
            lp = _log_softmax(logits)
            scores = lp[np.arange(T), paths[groups[target]]].sum(1)
            ref = -np.logaddexp.reduce(scores)
            got = float(M.ctc_loss(nc.Tensor(logits), list(target)).data)
            worst = max(worst, abs(got - ref))
            n += 1
    criterion(2, worst < 1e-6, f"1000 instances, max |diff| {worst:.1e}")


def test_c03_exhaustive_beam(criterion):
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(500):
        T, U = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        logits = rng.normal(size=(T, U + 1)) * 2
        lp = _log_softmax(logits)
        total = defaultdict(lambda: -np.inf)
        for path in itertools.product(range(U + 1), repeat=T):
            lab = _collapse(path, U)
            total[lab] = np.logaddexp(total[lab], lp[np.arange(T), list(path)].sum())
        best = max(total, key=total.get)
        hyp = de.beam_decode(logits, (U + 1) ** T)
        bad += tuple(hyp.tokens) != best or abs(hyp.score - total[best]) > 1e-9
    criterion(3, bad == 0, f"500 instances, {bad} mismatches")


def test_c04_purity_nmi(criterion):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(200):
        N = int(rng.integers(1, 21))
        z = rng.integers(0, int(rng.integers(1, 6)), N)
        y = rng.integers(0, int(rng.integers(1, 6)), N)
        table = Counter(zip(z.tolist(), y.tolist()))
        nz, ny = Counter(z.tolist()), Counter(y.tolist())
        pur = Fraction(sum(max(c for (k2, _), c in table.items() if k2 == k) for k in nz), N)
        I = sum(c / N * math.log(c * N / (nz[k] * ny[c2])) for (k, c2), c in table.items())
        hz = -sum(c / N * math.log(c / N) for c in nz.values())
        hy = -sum(c / N * math.log(c / N) for c in ny.values())
        ref = 2 * I / (hz + hy) if hz + hy > 0 else 1.0
        bad += cl.purity(z, y) != float(pur) or abs(cl.nmi(z, y) - ref) > 1e-12
    criterion(4, bad == 0, f"200 partitions, {bad} mismatches (purity exact, NMI to 1e-12)")


def test_c05_kmeans(criterion):
    rng = np.random.default_rng(3)
    rises = 0
    for i in range(100):
        X = rng.normal(size=(int(rng.integers(6, 40)), int(rng.integers(1, 4))))
        X[: len(X) // 2] += 3
        K = int(rng.integers(2, 5))
        objective = []
        for it in range(1, 9):
            cb = cl.kmeans_fit(X, K, max_iter=it, n_restarts=1, seed=i)
            objective.append(((X[:, None] - cb.centroids[None]) ** 2).sum(-1).min(1).sum())
        rises += int(np.any(np.diff(objective) > 1e-9 * objective[0]))
    cb = cl.kmeans_fit(np.array([[0.0], [1.0], [10.0], [11.0]]), 2, seed=0)
    cents = sorted(cb.centroids[:, 0].tolist())
    criterion(5, rises == 0 and cents == [0.5, 10.5],
              f"{rises}/100 problems with an objective increase; 1-D centroids {cents}")


def test_c06_masking(criterion):
    frames = np.random.default_rng(0).random((6, 3, 3))
    imposter = np.random.default_rng(1).random((8, 3, 3))
    plan = mk.MaskPlan(6, [(1, 3)], "visual", offsets=[0], imposter_len=8)
    out, _ = mk.corrupt_visual(frames, plan, imposter, "sub-seg")
    sub_ok = np.array_equal(out[1:3], imposter[0:2])
    keep_ok = np.array_equal(out[[0, 3, 4, 5]], frames[[0, 3, 4, 5]])
    # same-sequence offsets p keep the copied block [p, p+2) clear of the span [4, 6)
    allowed = [p for p in range(0, 10 - 2 + 1) if p + 2 <= 4 or p >= 6]
    dom = mk.offset_domain(4, 6, 10, True)
    enumerated = [p for a, b in dom for p in range(a, b + 1)]
    dom_ok = dom == [(0, 2), (6, 8)] and enumerated == allowed
    criterion(6, sub_ok and keep_ok and dom_ok,
              f"substitution {'exact' if sub_ok else 'wrong'}, unmasked {'identical' if keep_ok else 'changed'}, "
              f"offset domain {dom}")


def test_c07_modality_dropout(criterion):
    n, T, h = 10_000, 5, 3
    rng = np.random.default_rng(5)
    f_a = nc.Tensor(rng.random((n, T, h)) + 0.5)
    f_v = nc.Tensor(rng.random((n, T, h)) + 0.5)
    out = M.fuse(f_a, f_v, "train", 0.5, 0.5, seed=9).data
    a_on = out[..., :h] != 0
    v_on = out[..., h:] != 0
    uniform = all(np.all(x == x[:, :1, :1], axis=(1, 2)).all() for x in (a_on, v_on))
    a_seq, v_seq = a_on[:, 0, 0], v_on[:, 0, 0]
    freq = np.array([np.mean(a_seq & v_seq), np.mean(a_seq & ~v_seq), np.mean(~a_seq & v_seq)])
    ok = uniform and np.all(np.abs(freq - [0.5, 0.25, 0.25]) <= 0.02) and not np.any(~a_seq & ~v_seq)
    criterion(7, ok, "both/audio/video " + ", ".join(f"{f:.3f}" for f in freq)
              + f"; whole-sequence dropping {'holds' if uniform else 'violated'}")


def test_c08_span_coverage(criterion):
    T, n, p, l = 100, 1000, 0.08, 10
    realised = np.mean([mk.sample_spans(T, p, l, [42, i]).mask() for i in range(n)])
    # Monte Carlo reference from an independent sampler
    rng = np.random.default_rng(7)
    starts = rng.random((20_000, T)) < p
    covered = np.zeros_like(starts)
    for k in range(l):
        covered[:, k:] |= starts[:, : T - k]
    mc = covered.mean()
    criterion(8, abs(realised - mc) <= 0.01, f"realised {realised:.4f} vs Monte Carlo {mc:.4f} over {T * n} frames")


# ---------------------------------------------------------------- trend suite

SEEDS = (0, 1, 2)
PRE_STEPS = 3000  # masked-prediction steps per pre-training iteration
FT_STEPS = 1000  # CTC fine-tuning steps, identical for every compared model
K = [20, 20]
ALPHA = 0.5  # weight on unmasked frames for every pre-training run in this suite


def _plan(variant, steps):
    return tr.IterationPlan(variant=variant, n_iterations=2, K=K, steps=steps,
                            model=M.ModelConfig(codebook_size=K[0], alpha=ALPHA))


def _wer(res, data, mode):
    return tr.evaluate_wer(tr.best_model(res), data, data.split("test"), mode)[0]


class Trend:
    """Every end-to-end number the trend criteria need, for one seed."""

    def __init__(self, seed, root):
        self.seed = seed
        data = tr.prepare(sc.generate_corpus(sc.CorpusConfig(), seed))
        pre = data.split("pretrain")
        ft = tr.FinetuneConfig(steps=FT_STEPS)

        av = tr.iterative_pretrain(data, _plan("AV/MFCC->AV", [PRE_STEPS] * 2), seed, root / "av")
        self.av_metrics = av.metrics()
        self.nmi_mfcc, self.nmi_av2 = av.metrics()[0]["nmi"], av.metrics()[1]["nmi"]
        v = tr.iterative_pretrain(data, _plan("V/MFCC->V", [PRE_STEPS, 0]), seed, root / "v")
        self.nmi_v2 = v.metrics()[1]["nmi"]
        hog, _ = tr.initial_targets(data, "hog", K[0], seed, pre, pre)
        self.nmi_hog = cl.target_quality(hog, data.labels(pre))[1]

        arch = M.ModelConfig(codebook_size=K[0], alpha=ALPHA)
        scratch = tr.finetune(None, data, "visual-only", ft, seed, model_cfg=arch)
        self.wer_scratch = _wer(scratch, data, "visual-only")
        lip = tr.finetune(av.best_checkpoint(), data, "visual-only", ft, seed)
        self.wer_lip = _wer(lip, data, "visual-only")

        a_a = tr.iterative_pretrain(data, _plan("audio-only", [PRE_STEPS] * 2), seed, root / "a_a")
        a_av = tr.iterative_pretrain(data, _plan("A/MFCC->AV", [PRE_STEPS] * 2), seed, root / "a_av")
        self.wer_asr_a = _wer(tr.finetune(a_a.best_checkpoint(), data, "audio-only", ft, seed), data, "audio-only")
        self.wer_asr_av = _wer(tr.finetune(a_av.best_checkpoint(), data, "audio-only", ft, seed), data,
                               "audio-only")

        labeler = tr.finetune(av.best_checkpoint(), data, "audio-only", ft, seed)
        st = tr.self_train(labeler, data, pre, data.split("labeled"), av.best_checkpoint(), ft, seed)
        self.wer_self = _wer(st, data, "visual-only")


@pytest.fixture(scope="module")
def trends(tmp_path_factory):
    return {s: Trend(s, tmp_path_factory.mktemp(f"trend{s}")) for s in SEEDS}


def _majority(flags):
    return sum(flags) >= 2


def _fmt(vals):
    return "/".join(f"{v:.3f}" for v in vals)


def test_c09_iterative_refinement(trends, criterion):
    gains = [t.nmi_av2 - t.nmi_mfcc for t in trends.values()]
    criterion(9, _majority([g >= 0.05 for g in gains]),
              f"NMI iter-2 AV minus MFCC per seed {_fmt(gains)} (need >= 0.05)")


def test_c10_modality_advantage(trends, criterion):
    av = [t.nmi_av2 for t in trends.values()]
    v = [t.nmi_v2 for t in trends.values()]
    criterion(10, _majority([a > b for a, b in zip(av, v)]), f"iter-2 NMI AV {_fmt(av)} vs V {_fmt(v)}")


def test_c11_feature_floor(trends, criterion):
    gaps = [t.nmi_mfcc - t.nmi_hog for t in trends.values()]
    criterion(11, _majority([g >= 0.05 for g in gaps]), f"NMI MFCC minus HoG per seed {_fmt(gaps)} (need >= 0.05)")


def test_c12_pretraining_benefit(trends, criterion):
    rel = [1 - t.wer_lip / t.wer_scratch for t in trends.values()]
    criterion(12, _majority([r >= 0.2 for r in rel]),
              f"lip-reading WER pretrained {_fmt([t.wer_lip for t in trends.values()])} vs scratch "
              f"{_fmt([t.wer_scratch for t in trends.values()])}, relative gain {_fmt(rel)} (need >= 0.2)")


def test_c13_av_cluster_asr(trends, criterion):
    pairs = [(t.wer_asr_av, t.wer_asr_a) for t in trends.values()]
    wins = [a <= b for a, b in pairs]
    ties = sum(a == b for a, b in pairs)
    criterion(13, _majority(wins) and ties <= 1,
              f"ASR WER A/MFCC->AV {_fmt([a for a, _ in pairs])} vs A/MFCC->A {_fmt([b for _, b in pairs])}")


def test_c14_self_training(trends, criterion):
    pairs = [(t.wer_self, t.wer_lip) for t in trends.values()]
    criterion(14, _majority([a <= b for a, b in pairs]),
              f"lip-reading WER self-trained {_fmt([a for a, _ in pairs])} vs pretrained only "
              f"{_fmt([b for _, b in pairs])}")


def test_c15_reproducibility(trends, criterion, tmp_path):
    first = trends[SEEDS[0]]
    data = tr.prepare(sc.generate_corpus(sc.CorpusConfig(), first.seed))
    again = tr.iterative_pretrain(data, _plan("AV/MFCC->AV", [PRE_STEPS] * 2), first.seed, tmp_path / "av")
    criterion(15, again.metrics() == first.av_metrics,
              f"seed {first.seed} rerun metrics {'identical' if again.metrics() == first.av_metrics else 'differ'}")
