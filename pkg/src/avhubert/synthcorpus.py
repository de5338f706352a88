"""Synthetic audio-visual corpus.

A hidden phone sequence drives both streams. Audio is a two-formant
caricature per phone; video is a rendered mouth ellipse whose shape depends
only on the phone's viseme, so homophemous phones are indistinguishable from
a single frame.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SAMPLES_PER_FRAME = 640  # 16 kHz audio, 25 Hz video
SAMPLE_RATE = 16000
FRAME_RATE = 25
SPLITS = ("pretrain", "labeled", "validation", "test")
MAGIC = b"AVU1"
VERSION = 1


class CorpusError(ValueError):
    pass


class ContainerFormatError(CorpusError):
    pass


@dataclass(frozen=True)
class Phone:
    id: int
    formants: tuple[float, float]
    viseme: int
    duration: tuple[int, int]


@dataclass
class PhoneInventory:
    phones: list[Phone]
    n_visemes: int
    words: list[tuple[int, ...]]
    seed: int = 0

    @property
    def n_phones(self) -> int:
        return len(self.phones)

    @property
    def viseme_of(self) -> np.ndarray:
        return np.array([p.viseme for p in self.phones])

    def word_phones(self, word_seq) -> list[int]:
        out = []
        for w in word_seq:
            if not 0 <= w < len(self.words):
                raise KeyError(f"unknown word id {w}")
            out.extend(self.words[w])
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_visemes": self.n_visemes,
            "phones": [asdict(p) for p in self.phones],
            "words": [list(w) for w in self.words],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhoneInventory":
        phones = [Phone(p["id"], tuple(p["formants"]), p["viseme"], tuple(p["duration"]))
                  for p in d["phones"]]
        return cls(phones, d["n_visemes"], [tuple(w) for w in d["words"]], d.get("seed", 0))


def build_inventory(n_phones: int = 12, n_visemes: int = 8, n_words: int = 40,
                    seed: int = 0) -> PhoneInventory:
    """Random phone set with forced viseme collisions and a prefix-free lexicon.

    Words are 2-3 phones long, built so every phone occurs about equally
    often across the lexicon.
    """
    if not (2 <= n_visemes < n_phones <= 30) or n_words < 2:
        raise CorpusError(
            f"need 2 <= n_visemes < n_phones <= 30 and n_words >= 2, "
            f"got phones={n_phones} visemes={n_visemes} words={n_words}"
        )
    rng = np.random.default_rng([seed, 1])
    f1_grid = np.arange(250, 1000, 50)
    f2_grid = np.arange(900, 2700, 100)
    pairs = [(int(a), int(b)) for a in f1_grid for b in f2_grid if b - a >= 500]
    chosen = rng.choice(len(pairs), n_phones, replace=False)
    order = rng.permutation(n_phones)
    visemes = np.empty(n_phones, dtype=int)
    visemes[order[:n_visemes]] = np.arange(n_visemes)
    visemes[order[n_visemes:]] = rng.integers(0, n_visemes, n_phones - n_visemes)
    durations = [((2, 6), (3, 5))[int(b)] for b in rng.integers(0, 2, n_phones)]
    phones = [Phone(i, tuple(map(float, pairs[chosen[i]])), int(visemes[i]), durations[i])
              for i in range(n_phones)]
    words = _build_lexicon(n_phones, n_words, rng)
    return PhoneInventory(phones, n_visemes, words, seed)


def _build_lexicon(n_phones: int, n_words: int, rng) -> list[tuple[int, ...]]:
    max_words = sum(n_phones * (n_phones - 1) ** (k - 1) for k in (2, 3))
    if n_words > max_words // 2:
        raise CorpusError(f"too many words ({n_words}) for {n_phones} phones")
    counts = np.zeros(n_phones)
    words: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(words) < n_words:
        attempts += 1
        if attempts > 100_000:
            raise CorpusError("could not build a prefix-free lexicon")
        length = 2 if n_words <= 2 else int(rng.integers(2, 4))
        w: list[int] = []
        for _ in range(length):
            # least-used phones first, random tie-break, no immediate repeat
            key = counts + rng.random(n_phones) * 0.5
            if w:
                key[w[-1]] = np.inf
            w.append(int(np.argmin(key)))
        cand = tuple(w)
        if cand in seen or any(cand[: len(o)] == o or o[: len(cand)] == cand for o in words):
            continue
        words.append(cand)
        seen.add(cand)
        counts[list(cand)] += 1
    return words


@dataclass
class Speaker:
    formant_scale: float
    amplitude: float
    brightness: float
    width_scale: float
    stripe_angle: float = 0.0
    stripe_freq: float = 0.0
    stripe_phase: float = 0.0


def speaker_profile(speaker_id: int, inventory_seed: int = 0) -> Speaker:
    rng = np.random.default_rng([inventory_seed, 2, speaker_id])
    return Speaker(
        formant_scale=float(rng.uniform(0.88, 1.12)),
        amplitude=float(rng.uniform(0.4, 1.0)),
        brightness=float(rng.uniform(-0.15, 0.15)),
        width_scale=float(rng.uniform(0.9, 1.1)),
        stripe_angle=float(rng.uniform(0, np.pi)),
        stripe_freq=float(rng.uniform(0.15, 0.35)),
        stripe_phase=float(rng.uniform(0, 2 * np.pi)),
    )


@dataclass
class Utterance:
    wave: np.ndarray
    frames: np.ndarray
    phone_labels: np.ndarray
    word_seq: list[int]
    speaker_id: int = 0

    @property
    def T(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Utterance)
            and self.speaker_id == other.speaker_id
            and list(self.word_seq) == list(other.word_seq)
            and np.array_equal(self.wave, other.wave)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.phone_labels, other.phone_labels)
        )


def render_mouth(viseme: int, n_visemes: int, speaker: Speaker | None = None,
                 size: int = 16, texture: float = 0.0) -> np.ndarray:
    """Noise-free mouth image: dark filled ellipse on a skin-tone background.

    ``texture`` is the amplitude of the speaker's striped background pattern
    (skin, lighting); it never touches the mouth itself.
    """
    frac = viseme / max(n_visemes - 1, 1)
    opening = 0.1 + 0.8 * frac
    width = 0.85 - 0.35 * frac  # rounder as it opens
    brightness, wscale = (speaker.brightness, speaker.width_scale) if speaker else (0.0, 1.0)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    a = max(width * wscale * size / 2.0, 0.5)
    b = max(opening * size / 2.0 * 0.8, 0.5)
    inside = ((xx - c) / a) ** 2 + ((yy - c) / b) ** 2 <= 1.0
    bg = np.full((size, size), 0.65)
    if speaker is not None and texture:
        u = xx * np.cos(speaker.stripe_angle) + yy * np.sin(speaker.stripe_angle)
        bg = bg + texture * np.sin(2 * np.pi * speaker.stripe_freq * u + speaker.stripe_phase)
    img = np.where(inside, 0.15, bg) + brightness
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_utterance(inv: PhoneInventory, word_seq, speaker_id: int = 0, seed: int = 0,
                    audio_noise: float = 0.05, pixel_noise: float = 0.1,
                    image_size: int = 16, texture: float = 0.0) -> Utterance:
    """Render one utterance; a pure function of its arguments."""
    word_seq = [int(w) for w in word_seq]
    if not word_seq:
        raise CorpusError("empty utterance: word_seq must be non-empty")
    phone_seq = inv.word_phones(word_seq)
    rng = np.random.default_rng([seed, 3])
    spk = speaker_profile(speaker_id, inv.seed)
    durs = [int(rng.integers(inv.phones[p].duration[0], inv.phones[p].duration[1] + 1))
            for p in phone_seq]
    labels = np.repeat(phone_seq, durs).astype(np.int64)
    T = len(labels)
    n = T * SAMPLES_PER_FRAME
    # instantaneous formant tracks; phase is integrated so transitions stay continuous
    f1 = np.repeat([inv.phones[p].formants[0] for p in labels], SAMPLES_PER_FRAME)
    f2 = np.repeat([inv.phones[p].formants[1] for p in labels], SAMPLES_PER_FRAME)
    f1 = f1 * spk.formant_scale
    f2 = f2 * spk.formant_scale
    ph0 = rng.uniform(0, 2 * np.pi, 2)
    ph1 = ph0[0] + 2 * np.pi * np.cumsum(f1) / SAMPLE_RATE
    ph2 = ph0[1] + 2 * np.pi * np.cumsum(f2) / SAMPLE_RATE
    wave = spk.amplitude * (0.6 * np.sin(ph1) + 0.4 * np.sin(ph2))
    wave = wave + rng.normal(0.0, audio_noise, n)
    templates = {v: render_mouth(v, inv.n_visemes, spk, image_size, texture) for v in set(inv.viseme_of[labels])}
    frames = np.stack([templates[inv.phones[p].viseme] for p in labels])
    frames = np.clip(frames + rng.normal(0.0, pixel_noise, frames.shape), 0.0, 1.0)
    return Utterance(wave.astype(np.float32), frames.astype(np.float32), labels, word_seq, speaker_id)


# -- container


def save_utterance(path, u: Utterance) -> None:
    """Write the AVU1 container (plus a trailing u16 speaker id)."""
    T, H, W = u.frames.shape
    if len(u.wave) != SAMPLES_PER_FRAME * T or len(u.phone_labels) != T:
        raise CorpusError("utterance streams have inconsistent lengths")
    blob = bytearray(MAGIC) + struct.pack("<HIHH", VERSION, T, H, W)
    blob += np.asarray(u.frames, "<f4").tobytes()
    blob += np.asarray(u.wave, "<f4").tobytes()
    blob += np.asarray(u.phone_labels, "<u2").tobytes()
    blob += struct.pack("<H", len(u.word_seq)) + np.asarray(u.word_seq, "<u2").tobytes()
    blob += struct.pack("<H", u.speaker_id)
    Path(path).write_bytes(bytes(blob))


def load_utterance(path) -> Utterance:
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic")
    version, T, H, W = struct.unpack_from("<HIHH", buf, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    off = 14
    n_px, n_wav = T * H * W, SAMPLES_PER_FRAME * T
    need = off + 4 * n_px + 4 * n_wav + 2 * T + 2
    if len(buf) < need:
        raise ContainerFormatError(f"{path}: truncated (header says T={T})")
    frames = np.frombuffer(buf, "<f4", n_px, off).reshape(T, H, W)
    off += 4 * n_px
    wave = np.frombuffer(buf, "<f4", n_wav, off)
    off += 4 * n_wav
    labels = np.frombuffer(buf, "<u2", T, off).astype(np.int64)
    off += 2 * T
    (nw,) = struct.unpack_from("<H", buf, off)
    off += 2
    if len(buf) != off + 2 * nw + 2:
        raise ContainerFormatError(f"{path}: size does not match header")
    words = np.frombuffer(buf, "<u2", nw, off).astype(int).tolist()
    (spk,) = struct.unpack_from("<H", buf, off + 2 * nw)
    return Utterance(wave.astype(np.float32), frames.astype(np.float32), labels, words, spk)


# -- corpus


@dataclass
class CorpusConfig:
    n_phones: int = 12
    n_visemes: int = 8
    n_words: int = 40
    n_speakers: int = 16
    min_words: int = 2
    max_words: int = 4
    audio_noise: float = 0.05
    pixel_noise: float = 0.25
    texture: float = 0.3
    image_size: int = 16
    splits: dict[str, int] = field(
        default_factory=lambda: {"pretrain": 2000, "labeled": 200, "validation": 100, "test": 200}
    )

    def __post_init__(self):
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise CorpusError(f"unknown split names {sorted(unknown)}")
        if self.image_size % 4:
            raise CorpusError("image_size must be a multiple of 4")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CorpusRecord:
    uid: str
    split: str
    T: int
    speaker: int
    words: list[int]
    path: str | None = None


@dataclass
class Corpus:
    """In-memory corpus; ``utterances`` maps record uid to the rendered utterance."""

    inventory: PhoneInventory
    records: list[CorpusRecord]
    utterances: dict[str, Utterance]
    seed: int = 0
    config_hash: str = ""

    def split(self, name: str) -> list[str]:
        return [r.uid for r in self.records if r.split == name]

    def subset(self, uids) -> "Corpus":
        keep = set(uids)
        return Corpus(self.inventory, [r for r in self.records if r.uid in keep],
                      {u: self.utterances[u] for u in uids}, self.seed, self.config_hash)


def _plan_records(cfg: CorpusConfig, inv: PhoneInventory, seed: int):
    rng = np.random.default_rng([seed, 4])
    plan = []
    idx = 0
    for split in SPLITS:
        for _ in range(cfg.splits.get(split, 0)):
            n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            words = rng.integers(0, len(inv.words), n).tolist()
            spk = int(rng.integers(cfg.n_speakers))
            plan.append((f"utt{idx:05d}", split, words, spk, idx))
            idx += 1
    return plan


def generate_corpus(cfg: CorpusConfig, seed: int = 0, workers: int = 1) -> Corpus:
    """Render the whole corpus in memory (deterministic in (cfg, seed))."""
    inv = build_inventory(cfg.n_phones, cfg.n_visemes, cfg.n_words, seed)
    plan = _plan_records(cfg, inv, seed)

    def render(item):
        uid, _, words, spk, idx = item
        return synth_utterance(inv, words, spk, seed=seed * 1_000_003 + idx,
                               audio_noise=cfg.audio_noise, pixel_noise=cfg.pixel_noise,
                               image_size=cfg.image_size, texture=cfg.texture)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            utts = list(ex.map(render, plan))
    else:
        utts = [render(p) for p in plan]
    records = [CorpusRecord(uid, split, u.T, spk, words)
               for (uid, split, words, spk, _), u in zip(plan, utts)]
    return Corpus(inv, records, {r.uid: u for r, u in zip(records, utts)}, seed, cfg.config_hash())


def gen_corpus(cfg: CorpusConfig, seed: int, out_dir, workers: int = 1) -> dict:
    """Generate, write one ``.avu`` file per utterance plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        (out / "utts").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    corpus = generate_corpus(cfg, seed, workers)
    records = []
    for r in corpus.records:
        rel = f"utts/{r.uid}.avu"
        save_utterance(out / rel, corpus.utterances[r.uid])
        records.append({"path": rel, "split": r.split, "T": r.T, "speaker": r.speaker,
                        "words": r.words})
    manifest = {
        "seed": seed,
        "config_hash": corpus.config_hash,
        "config": asdict(cfg),
        "inventory": corpus.inventory.to_dict(),
        "records": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    inv = PhoneInventory.from_dict(manifest["inventory"])
    records, utts = [], {}
    for rec in manifest["records"]:
        uid = Path(rec["path"]).stem
        u = load_utterance(d / rec["path"])
        if u.T != rec["T"]:
            raise CorpusError(f"{rec['path']}: manifest T={rec['T']} but file has T={u.T}")
        records.append(CorpusRecord(uid, rec["split"], rec["T"], rec["speaker"], rec["words"], rec["path"]))
        utts[uid] = u
    return Corpus(inv, records, utts, manifest["seed"], manifest["config_hash"])
