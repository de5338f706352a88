"""Span masks and input corruption.

Spans are half-open ``(s, t)`` intervals over video frames. Video spans can be
filled by substitution: the span is overwritten with ``t - s`` consecutive
frames of an imposter clip starting at offset ``p``::

    corrupted[s:t] = imposter[p : p + t - s]

With a same-sequence imposter, ``p`` is restricted to
``[0, 2s - t] U [t, T_f - (t - s)]`` so the copied window never overlaps the
span it replaces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

MODALITIES = ("audio", "visual", "fused")
VISUAL_MODES = ("sub-seg", "sub-frm", "learned", "gauss")


class MaskingError(ValueError):
    pass


@dataclass
class MaskPlan:
    T: int
    spans: list[tuple[int, int]] = field(default_factory=list)
    modality: str = "fused"
    offsets: list[int | None] = field(default_factory=list)
    imposter_len: int | None = None
    same_sequence: bool = True

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise MaskingError(f"unknown modality {self.modality!r}")
        self.spans = merge_spans(self.spans)
        for s, t in self.spans:
            if not 0 <= s < t <= self.T:
                raise MaskingError(f"span ({s}, {t}) outside [0, {self.T})")

    def mask(self) -> np.ndarray:
        m = np.zeros(self.T, dtype=bool)
        for s, t in self.spans:
            m[s:t] = True
        return m

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        d["spans"] = [tuple(s) for s in d["spans"]]
        return cls(**d)


def merge_spans(spans) -> list[tuple[int, int]]:
    """Sort spans and merge overlapping or touching ones."""
    out: list[list[int]] = []
    for s, t in sorted((int(a), int(b)) for a, b in spans):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], t)
        else:
            out.append([s, t])
    return [(s, t) for s, t in out]


def sample_spans(T: int, p_starts: float, span_len: int, seed, modality: str = "fused") -> MaskPlan:
    """Each frame starts a span with probability ``p_starts``; spans cover
    ``[start, min(start + span_len, T))`` and are merged."""
    if T < 1 or span_len < 1 or not 0 <= p_starts <= 1:
        raise MaskingError(f"invalid span parameters T={T}, p={p_starts}, l={span_len}")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(T) < p_starts)
    return MaskPlan(T, [(int(s), min(int(s) + span_len, T)) for s in starts], modality)


def expected_masked_fraction(T: int, p_starts: float, span_len: int) -> float:
    """Exact mean coverage: frame j is masked unless none of the
    min(j + 1, span_len) frames that could cover it is a start."""
    j = np.arange(T)
    return float(np.mean(1.0 - (1.0 - p_starts) ** np.minimum(j + 1, span_len)))


def offset_domain(s: int, t: int, T_f: int, same_sequence: bool) -> list[tuple[int, int]]:
    """Inclusive integer intervals from which a substitution offset may be drawn."""
    n = t - s
    if not same_sequence:
        parts = [(0, T_f - n)]
    else:
        parts = [(0, 2 * s - t), (t, T_f - n)]
    return [(a, b) for a, b in parts if a <= b]


def sample_offsets(plan: MaskPlan, T_f: int, same_sequence: bool, seed,
                   fallback: bool = False) -> MaskPlan:
    """Draw one offset per span uniformly over its valid domain.

    An empty domain raises ``MaskingError`` unless ``fallback`` is set, in
    which case that span's offset is ``None`` (learned-embedding corruption).
    """
    rng = np.random.default_rng(seed)
    offsets: list[int | None] = []
    for s, t in plan.spans:
        dom = offset_domain(s, t, T_f, same_sequence)
        sizes = [b - a + 1 for a, b in dom]
        if not dom:
            if not fallback:
                raise MaskingError(f"no valid imposter offset for span ({s}, {t}) with T_f={T_f}")
            offsets.append(None)
            continue
        k = int(rng.integers(sum(sizes)))
        for (a, _), size in zip(dom, sizes):
            if k < size:
                offsets.append(a + k)
                break
            k -= size
    return MaskPlan(plan.T, plan.spans, plan.modality, offsets, T_f, same_sequence)


def corrupt_visual(frames, plan: MaskPlan, imposter=None, mode: str = "sub-seg", seed=None):
    """Corrupt image frames inside the plan's spans.

    Returns ``(frames_out, flags)``. ``flags`` marks frames the model must
    replace with its learned visual mask embedding: every masked frame in
    ``learned`` mode, plus any substitution span whose offset is ``None``.
    Frames outside the spans are returned bit-identical.
    """
    if plan.modality == "audio":
        raise MaskingError("corrupt_visual needs a visual or fused plan")
    if mode not in VISUAL_MODES:
        raise MaskingError(f"unknown visual masking mode {mode!r}")
    frames = np.asarray(frames)
    out = frames.copy()
    flags = np.zeros(len(frames), dtype=bool)
    if not plan.spans:
        return out, flags
    if mode in ("sub-seg", "sub-frm") and imposter is None:
        raise MaskingError(f"mode {mode} needs imposter frames")
    rng = np.random.default_rng(seed)
    if mode == "sub-seg" and len(plan.offsets) != len(plan.spans):
        raise MaskingError("sub-seg needs one offset per span; call sample_offsets first")
    for i, (s, t) in enumerate(plan.spans):
        if mode == "learned":
            flags[s:t] = True
        elif mode == "gauss":
            out[s:t] = np.clip(rng.normal(0.5, 0.2, size=out[s:t].shape), 0.0, 1.0)
        elif mode == "sub-seg":
            p = plan.offsets[i]
            if p is None:
                flags[s:t] = True
            else:
                out[s:t] = imposter[p : p + t - s]
        else:  # sub-frm: independent frames, never from the span itself when same-sequence
            pool = np.arange(len(imposter))
            if plan.same_sequence:
                pool = pool[(pool < s) | (pool >= t)]
            if len(pool) == 0:
                flags[s:t] = True
            else:
                out[s:t] = imposter[rng.choice(pool, size=t - s)]
    return out, flags


def corrupt_audio(features, plan: MaskPlan):
    """Flag masked audio frames; the model swaps in its learned audio mask embedding."""
    if plan.modality == "visual":
        raise MaskingError("corrupt_audio needs an audio or fused plan")
    features = np.asarray(features)
    if len(features) != plan.T:
        raise MaskingError(f"plan length {plan.T} != feature length {len(features)}")
    return features.copy(), plan.mask()
