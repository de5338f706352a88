"""CTC decoding, word error rate and report tables.

Decoding works on phone tokens; words are recovered afterwards by greedy
longest-match segmentation against the lexicon. A run of phones that no
lexicon word matches becomes a single ``UNK`` token, which never equals a
reference word and so always costs one error.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNK = -1
ITERATION_HEADER = ["run", "variant", "iteration", "layer", "K", "purity", "nmi", "wer"]
VARIANT_HEADER = ["variant", "run", "iterations", "purity", "nmi", "wer"]
LENGTH_HEADER = ["run", "bucket", "count", "ref_words", "errors", "wer"]
DECODE_HEADER = ["uid", "ref", "hyp", "ref_len", "errors"]
DEFAULT_BUCKETS = ((1, 2), (3, 3), (4, 4), (5, 1000))


class ReportError(OSError):
    pass


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


def collapse(path, blank: int) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits, blank: int | None = None) -> list[int]:
    logits = np.asarray(logits)
    blank = logits.shape[-1] - 1 if blank is None else blank
    return collapse(logits.argmax(-1), blank)


def beam_decode(logits, beam_width: int = 8, blank: int | None = None) -> Hypothesis:
    """CTC prefix beam search; scores are log marginal probabilities of labelings."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = _log_softmax(logits)
    T, C = lp.shape
    blank = C - 1 if blank is None else blank
    ninf = -np.inf
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beam: dict[tuple, tuple[float, float]] = {(): (0.0, ninf)}
    for t in range(T):
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [ninf, ninf])
        for prefix, (pb, pnb) in beam.items():
            total = np.logaddexp(pb, pnb)
            e = nxt[prefix]
            e[0] = np.logaddexp(e[0], total + lp[t, blank])
            last = prefix[-1] if prefix else None
            for c in range(C):
                if c == blank:
                    continue
                p = lp[t, c]
                ext = prefix + (c,)
                en = nxt[ext]
                if c == last:
                    # repeat without a blank stays on the same prefix
                    e[1] = np.logaddexp(e[1], pnb + p)
                    en[1] = np.logaddexp(en[1], pb + p)
                else:
                    en[1] = np.logaddexp(en[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beam = {k: (v[0], v[1]) for k, v in ranked[:beam_width]}
    best = max(beam.items(), key=lambda kv: (np.logaddexp(*kv[1]), [-x for x in kv[0]]))
    return Hypothesis(tuple(best[0]), float(np.logaddexp(*best[1])))


def segment_words(phones, lexicon) -> list[int]:
    """Greedy longest-match segmentation of a phone sequence into word ids.

    ``lexicon`` is a sequence of phone tuples indexed by word id.
    """
    by_first: dict[int, list[tuple[int, tuple]]] = defaultdict(list)
    for wid, w in enumerate(lexicon):
        by_first[w[0]].append((wid, tuple(w)))
    for v in by_first.values():
        v.sort(key=lambda x: -len(x[1]))
    phones = list(phones)
    out: list[int] = []
    i = 0
    in_unk = False
    while i < len(phones):
        hit = next((wid, w) for wid, w in by_first.get(phones[i], []) + [(None, ())]
                   if wid is None or tuple(phones[i : i + len(w)]) == w)
        if hit[0] is None:
            if not in_unk:
                out.append(UNK)
            in_unk = True
            i += 1
        else:
            out.append(hit[0])
            in_unk = False
            i += len(hit[1])
    return out


def edit_distance(hyp, ref) -> int:
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp, ref) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(pairs) -> float:
    """Total edit distance over total reference words for (hyp, ref) pairs."""
    errs = sum(edit_distance(h, r) for h, r in pairs)
    n = sum(len(r) for _, r in pairs)
    if n == 0:
        raise ValueError("no reference words")
    return errs / n


# ---------------------------------------------------------------- reports


def write_decode_results(path, rows) -> None:
    """rows: iterable of (uid, ref word ids, hyp word ids)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECODE_HEADER)
        for uid, ref, hyp in rows:
            w.writerow([uid, " ".join(map(str, ref)), " ".join(map(str, hyp)), len(ref),
                        edit_distance(hyp, ref)])


def read_decode_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["ref_len"] = int(r["ref_len"])
        r["errors"] = int(r["errors"])
    return rows


def wer_by_length(rows, buckets=DEFAULT_BUCKETS) -> list[dict]:
    """Bucket decode rows by reference length (inclusive ranges, which must partition)."""
    out = []
    for lo, hi in buckets:
        sel = [r for r in rows if lo <= r["ref_len"] <= hi]
        n = sum(r["ref_len"] for r in sel)
        e = sum(r["errors"] for r in sel)
        out.append({"bucket": f"{lo}-{hi}", "count": len(sel), "ref_words": n, "errors": e,
                    "wer": e / n if n else float("nan")})
    if sum(b["count"] for b in out) != len(rows):
        raise ValueError("length buckets do not cover every utterance")
    return out


def _read_metrics(run: Path) -> list[dict]:
    with open(run / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def report(run_dirs, out_dir) -> dict[str, Path]:
    """Assemble iteration, variant and WER-by-length tables from run directories.

    A pre-training run directory holds ``manifest.json`` and ``metrics.csv``;
    optional ``decode.csv`` files (at the run root or under ``iter{i}/``)
    supply WER. A fine-tuning run directory needs only ``decode.csv``.
    """
    run_dirs = [Path(r) for r in run_dirs]
    if not run_dirs:
        raise ValueError("no run directories given")
    missing = [str(r / f) for r in run_dirs if not (r / "decode.csv").exists()
               for f in ("manifest.json", "metrics.csv") if not (r / f).exists()]
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    it_rows, var_rows, len_rows = [], [], []
    for run in run_dirs:
        if (run / "manifest.json").exists():
            variant = json.loads((run / "manifest.json").read_text()).get("variant", "")
            metrics = _read_metrics(run)
        else:
            ft = run / "finetune.json"
            variant = "finetune " + json.loads(ft.read_text()).get("mode", "") if ft.exists() else "finetune"
            metrics = []
        for m in metrics:
            dec = run / f"iter{m['iteration']}" / "decode.csv"
            w = ""
            if dec.exists():
                rows = read_decode_results(dec)
                w = sum(r["errors"] for r in rows) / sum(r["ref_len"] for r in rows)
            it_rows.append([run.name, variant, m["iteration"], m["layer"], m["K"], m["purity"],
                            m["nmi"], w])
        w = ""
        if (run / "decode.csv").exists():
            rows = read_decode_results(run / "decode.csv")
            w = sum(r["errors"] for r in rows) / sum(r["ref_len"] for r in rows)
            for b in wer_by_length(rows):
                len_rows.append([run.name, b["bucket"], b["count"], b["ref_words"], b["errors"],
                                 b["wer"]])
        last = metrics[-1] if metrics else {"purity": "", "nmi": ""}
        var_rows.append([variant, run.name, len(metrics), last["purity"], last["nmi"], w])
    paths = {}
    for name, header, rows in (("iterations.csv", ITERATION_HEADER, it_rows),
                               ("variants.csv", VARIANT_HEADER, var_rows),
                               ("wer_by_length.csv", LENGTH_HEADER, len_rows)):
        p = out_dir / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        paths[name] = p
    return paths
