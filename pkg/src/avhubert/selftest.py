"""Oracle suites run by ``avhubert selftest``.

Each suite compares an implementation against an independent brute-force
computation and returns ``(ok, detail)``.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from . import clusterlab as cl
from . import decode_eval as de
from . import masking as mk
from . import model as M
from . import neuralcore as nc
from .neuralcore import gradcheck


def gradients(seed: int = 0):
    cfg = M.ModelConfig(dim=16, layers=2, heads=2, ffn_dim=32, image_size=4, visual_hidden=8,
                        audio_dim=6, codebook_size=5, dropout=0.0, layerdrop=0.0, alpha=0.5)
    with nc.precision("f64"):
        rng = np.random.default_rng(seed)
        model = M.AVHubertModel(cfg, seed=seed)
        model.add_ctc_head(3, seed)
        B, T = 2, 6
        batch = M.make_batch([rng.normal(size=(T, 6)), rng.normal(size=(T - 2, 6))],
                             [rng.random((T, 4, 4)), rng.random((T - 2, 4, 4))], ["a", "b"],
                             audio_flags=[rng.random(T) < 0.3, rng.random(T - 2) < 0.3],
                             visual_flags=[rng.random(T) < 0.3, rng.random(T - 2) < 0.3],
                             feature_flags=[rng.random(T) < 0.3, rng.random(T - 2) < 0.3])
        z = rng.integers(0, 5, size=(B, T))
        ma = np.zeros((B, T), bool)
        ma[:, 1:3] = True

        def loss():
            e = model.forward(batch, "both")
            l1 = M.masked_loss(model.predict_clusters(e), z, ma, None, cfg.alpha, batch.valid)
            l2 = M.ctc_loss_batch(nc.log_softmax(model.ctc_logits(e)), [[0, 1], [2]],
                                  batch.lengths, model.blank)
            return l1 + l2

        errs = gradcheck.check_gradients(loss, model.params)
    worst = max(errs.values())
    return worst < 1e-4, f"max relative error {worst:.2e} over {len(errs)} tensors"


def _ctc_brute(lp, target, blank):
    T, C = lp.shape
    tot = -np.inf
    for path in itertools.product(range(C), repeat=T):
        if de.collapse(path, blank) == list(target):
            tot = np.logaddexp(tot, lp[np.arange(T), path].sum())
    return -tot


def ctc(n: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        T, U = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        if (U + 1) ** T > 5000:
            T = max(1, int(math.log(5000) / math.log(U + 1)))
        L = int(rng.integers(0, min(T, 3) + 1))
        target = list(rng.integers(0, U, size=L))
        if M.ctc_min_frames(target) > T:
            continue
        logits = rng.normal(size=(T, U + 1))
        lp = de._log_softmax(logits)
        got = float(M.ctc_loss(nc.Tensor(logits), target).data)
        worst = max(worst, abs(got - _ctc_brute(lp, target, U)))
        done += 1
    return worst < 1e-6, f"{n} instances, max |diff| {worst:.1e}"


def beam(n: int = 500, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        T, U = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        logits = rng.normal(size=(T, U + 1)) * 2
        lp = de._log_softmax(logits)
        scores = {}
        for path in itertools.product(range(U + 1), repeat=T):
            lab = tuple(de.collapse(path, U))
            scores[lab] = np.logaddexp(scores.get(lab, -np.inf), lp[np.arange(T), path].sum())
        hyp = de.beam_decode(logits, (U + 1) ** T)
        bad += abs(hyp.score - max(scores.values())) > 1e-9
    return bad == 0, f"{n} instances, {bad} mismatches"


def metrics(n: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 21))
        z, y = rng.integers(0, 4, N), rng.integers(0, 4, N)
        pur = sum(max(np.sum((z == k) & (y == c)) for c in set(y)) for k in set(z)) / N
        H = lambda a: -sum((np.sum(a == v) / N) * math.log(np.sum(a == v) / N) for v in set(a))
        I = sum((np.sum((z == k) & (y == c)) / N)
                * math.log(np.sum((z == k) & (y == c)) * N / (np.sum(z == k) * np.sum(y == c)))
                for k in set(z) for c in set(y) if np.any((z == k) & (y == c)))
        hz, hy = H(z), H(y)
        ref = 2 * I / (hz + hy) if hz > 0 and hy > 0 else (1.0 if hz == hy else 0.0)
        worst = max(worst, abs(cl.purity(z, y) - pur), abs(cl.nmi(z, y) - ref))
    return worst < 1e-12, f"{n} partitions, max |diff| {worst:.1e}"


def kmeans(n: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    rises = 0
    for i in range(n):
        X = rng.normal(size=(int(rng.integers(5, 60)), int(rng.integers(1, 4))))
        cb = cl.kmeans_fit(X, int(rng.integers(1, min(5, len(X)) + 1)), n_restarts=1, seed=i)
        rises += int(np.any(np.diff(cb.history) > 1e-9 * np.abs(cb.history[:-1]).max(initial=1)))
    cb = cl.kmeans_fit(np.array([[0.0], [1.0], [10.0], [11.0]]), 2, seed=0)
    ok_1d = np.allclose(sorted(cb.centroids[:, 0]), [0.5, 10.5])
    return rises == 0 and ok_1d, f"{rises} objective increases; 1-D example {'ok' if ok_1d else 'wrong'}"


def masking():
    frames = np.arange(5 * 4, dtype=np.float64).reshape(5, 2, 2)
    imposter = -np.arange(6 * 4, dtype=np.float64).reshape(6, 2, 2) - 1
    plan = mk.MaskPlan(5, [(1, 3)], "visual", offsets=[0], imposter_len=6)
    out, flags = mk.corrupt_visual(frames, plan, imposter, "sub-seg")
    ok_sub = (np.array_equal(out[1:3], imposter[0:2]) and not flags.any()
              and np.array_equal(out[[0, 3, 4]], frames[[0, 3, 4]]))
    dom = mk.offset_domain(4, 6, 10, True)
    return ok_sub and dom == [(0, 2), (6, 8)], f"substitution {'exact' if ok_sub else 'wrong'}; offset domain {dom}"


def coverage(seed: int = 0):
    T, n = 100, 1000
    total = sum(int(mk.sample_spans(T, 0.08, 10, [seed, i]).mask().sum()) for i in range(n))
    realised = total / (T * n)
    expected = mk.expected_masked_fraction(T, 0.08, 10)
    return abs(realised - expected) <= 0.01, f"realised {realised:.4f} vs expected {expected:.4f}"


def dropout(seed: int = 0):
    br = M.sample_branches(10_000, 0.5, 0.5, np.random.default_rng(seed))
    freq = np.bincount(br, minlength=3) / len(br)
    ok = np.allclose(freq, [0.5, 0.25, 0.25], atol=0.02)
    return ok, "branch frequencies " + ", ".join(f"{f:.3f}" for f in freq)


SUITES = {
    "gradients": gradients,
    "ctc": ctc,
    "beam": beam,
    "cluster-metrics": metrics,
    "kmeans": kmeans,
    "masking": masking,
    "span-coverage": coverage,
    "modality-dropout": dropout,
}


def run_all(names=None, out=print) -> bool:
    ok_all = True
    for name in names or SUITES:
        t = time.time()
        try:
            ok, detail = SUITES[name]()
        except Exception as e:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.time() - t:.1f}s)")
    return ok_all
