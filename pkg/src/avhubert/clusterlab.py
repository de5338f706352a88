"""k-means codebooks, frame targets and cluster-quality metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import align_labels_25hz, corpus_normalize


class ClusterError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray
    feature_kind: str = ""
    fit_seed: int = 0
    inertia: float = 0.0
    history: list[float] = field(default_factory=list)
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


@dataclass
class ClusterTargets:
    targets: dict[str, np.ndarray]
    K: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        for uid, z in self.targets.items():
            if z.size and (z.min() < 0 or z.max() >= self.K):
                raise ClusterError(f"targets for {uid} fall outside [0, {self.K})")


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = len(X)
    centers = [int(rng.integers(N))]
    d = _sq_dists(X, X[centers]).ravel()
    for _ in range(1, K):
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with a centre; pick any unused index
            nxt = int(rng.choice(np.setdiff1d(np.arange(N), centers)))
        else:
            nxt = int(rng.choice(N, p=d / total))
        centers.append(nxt)
        d = np.minimum(d, _sq_dists(X, X[nxt : nxt + 1]).ravel())
    return X[centers].copy()


def _update(X, labels, K):
    """Centroid means, repairing empty clusters with the worst-fit point."""
    counts = np.bincount(labels, minlength=K)
    C = np.zeros((K, X.shape[1]))
    np.add.at(C, labels, X)
    C[counts > 0] /= counts[counts > 0, None]
    for k in np.flatnonzero(counts == 0):
        own = ((X - C[labels]) ** 2).sum(1)
        own[counts[labels] <= 1] = -1.0  # never empty another cluster
        far = int(own.argmax())
        src = labels[far]
        labels[far] = k
        counts[src] -= 1
        counts[k] = 1
        C[k] = X[far]
        C[src] = X[labels == src].mean(0)
    return C


def _lloyd(X, C, max_iter):
    history = []
    labels = None
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new = D.argmin(1)
        history.append(float(D[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            return C, history[-1], history
        labels = new
        C = _update(X, labels, len(C))
    history.append(float(_sq_dists(X, C).min(1).sum()))
    return C, history[-1], history


def kmeans_fit(X, K: int, max_iter: int = 100, n_restarts: int = 3, seed: int = 0,
               feature_kind: str = "") -> Codebook:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins.

    ``Codebook.history`` holds the objective after every assignment step of the
    winning restart (non-increasing).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ClusterError(f"X must be 2-D, got shape {X.shape}")
    if len(X) < K or K < 1:
        raise ClusterError(f"need N >= K >= 1, got N={len(X)}, K={K}")
    if not np.all(np.isfinite(X)):
        raise ClusterError("X contains NaN or Inf")
    best = None
    for r in range(n_restarts):
        rng = np.random.default_rng([seed, r])
        C, inertia, hist = _lloyd(X, _kmeanspp(X, K, rng), max_iter)
        if best is None or inertia < best[1]:
            best = (C, inertia, hist)
    C, inertia, hist = best
    return Codebook(C.astype(np.float32), feature_kind, seed, max(inertia, 0.0), hist)


def assign(X, codebook: Codebook) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties go to the lower index."""
    X = np.asarray(X, dtype=np.float64)
    C = codebook.centroids.astype(np.float64)
    if X.ndim != 2 or X.shape[1] != C.shape[1]:
        raise ClusterError(f"dimension mismatch: X {X.shape} vs centroids {C.shape}")
    out = np.empty(len(X), dtype=np.int64)
    for i in range(0, len(X), 8192):
        out[i : i + 8192] = _sq_dists(X[i : i + 8192], C).argmin(1)
    return out


# -- metrics


def _contingency(z, labels) -> np.ndarray:
    z = np.asarray(z)
    labels = np.asarray(labels)
    if z.shape != labels.shape or z.ndim != 1:
        raise ClusterError(f"z and labels must be equal-length 1-D, got {z.shape} and {labels.shape}")
    if z.size == 0:
        raise ClusterError("empty input")
    _, zi = np.unique(z, return_inverse=True)
    _, ci = np.unique(labels, return_inverse=True)
    table = np.zeros((zi.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(table, (zi, ci), 1)
    return table


def purity(z, labels) -> float:
    table = _contingency(z, labels)
    return float(table.max(1).sum() / table.sum())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(z, labels) -> float:
    """2 I(Z;C) / (H(Z) + H(C)), natural logs."""
    table = _contingency(z, labels)
    hz = _entropy(table.sum(1))
    hc = _entropy(table.sum(0))
    if hz == 0.0 and hc == 0.0:
        return 1.0
    if hz == 0.0 or hc == 0.0:
        return 0.0
    n = table.sum()
    pj = table / n
    pz = pj.sum(1, keepdims=True)
    pc = pj.sum(0, keepdims=True)
    nz = pj > 0
    mi = float((pj[nz] * np.log(pj[nz] / (pz @ pc)[nz])).sum())
    return float(np.clip(2.0 * mi / (hz + hc), 0.0, 1.0))


# -- targets


def make_targets(features: dict[str, np.ndarray], K: int, seed: int = 0, rate: int = 25,
                 kind: str = "", cap: int = 200_000, normalize: bool = False,
                 max_iter: int = 100, n_restarts: int = 3, source: dict | None = None,
                 fit_ids=None):
    """Cluster per-utterance feature matrices into 25 Hz frame targets.

    ``features`` maps utterance id to a [frames x D] matrix. 100 Hz inputs are
    assigned at 100 Hz and reduced to 25 Hz by 4-frame majority vote. The
    codebook is fitted on at most ``cap`` frames drawn without replacement,
    taken from ``fit_ids`` when given (every utterance is still assigned).
    """
    ids = list(features)
    mats = [np.asarray(features[u], dtype=np.float64) for u in ids]
    stats = None
    if normalize:
        mats, stats = corpus_normalize(mats)
    X = np.concatenate(mats, axis=0)
    if fit_ids is None:
        pool = X
    else:
        keep = set(fit_ids)
        pool = np.concatenate([m for u, m in zip(ids, mats) if u in keep], axis=0)
    rng = np.random.default_rng([seed, 7919])
    fitX = pool if len(pool) <= cap else pool[np.sort(rng.choice(len(pool), cap, replace=False))]
    cb = kmeans_fit(fitX, K, max_iter=max_iter, n_restarts=n_restarts, seed=seed, feature_kind=kind)
    cb.norm_stats = stats
    z_all = assign(X, cb)
    out = {}
    pos = 0
    for u, m in zip(ids, mats):
        z = z_all[pos : pos + len(m)]
        pos += len(m)
        out[u] = align_labels_25hz(z) if rate == 100 else z.copy()
    src = {"feature": kind, "K": K, "seed": seed}
    src.update(source or {})
    return ClusterTargets(out, K, src), cb


def target_quality(targets: ClusterTargets, labels: dict[str, np.ndarray]) -> tuple[float, float]:
    """(purity, NMI) of pooled frame targets against ground-truth frame labels."""
    ids = [u for u in targets.targets if u in labels]
    z = np.concatenate([targets.targets[u] for u in ids])
    y = np.concatenate([labels[u][: len(targets.targets[u])] for u in ids])
    return purity(z, y), nmi(z, y)


# -- AVT1 / AVK1 files


def save_targets(path, targets: ClusterTargets) -> None:
    out = bytearray(b"AVT1") + struct.pack("<II", targets.K, len(targets.targets))
    for uid, z in targets.targets.items():
        b = uid.encode()
        out += struct.pack("<H", len(b)) + b + struct.pack("<I", len(z))
        out += np.asarray(z, "<u2").tobytes()
    Path(path).write_bytes(bytes(out))


def load_targets(path) -> ClusterTargets:
    buf = Path(path).read_bytes()
    if buf[:4] != b"AVT1":
        raise ClusterError("bad magic, not an AVT1 targets file")
    K, n = struct.unpack_from("<II", buf, 4)
    off = 12
    out = {}
    try:
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", buf, off)
            uid = buf[off + 2 : off + 2 + nl].decode()
            off += 2 + nl
            (T,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + 2 * T > len(buf):
                raise ClusterError("truncated targets file")
            out[uid] = np.frombuffer(buf, "<u2", count=T, offset=off).astype(np.int64)
            off += 2 * T
    except struct.error as e:
        raise ClusterError("truncated targets file") from e
    return ClusterTargets(out, K)


def save_codebook(path, cb: Codebook) -> None:
    K, D = cb.centroids.shape
    Path(path).write_bytes(b"AVK1" + struct.pack("<II", K, D) + cb.centroids.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    if buf[:4] != b"AVK1":
        raise ClusterError("bad magic, not an AVK1 codebook")
    K, D = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * K * D:
        raise ClusterError("truncated codebook")
    return Codebook(np.frombuffer(buf, "<f4", offset=12).reshape(K, D).copy())
