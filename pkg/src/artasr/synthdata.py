"""Synthetic articulatory speech corpus.

Transcripts are spelled with a small grapheme inventory; each grapheme has a
9-channel tract-variable target. Targets are laid out at 100 Hz, smoothed to
model coarticulation, jittered, z-scored, pair-averaged down to 50 Hz and
finally pushed through a fixed random map to produce 50 Hz acoustic feature
frames. The TVs therefore cause the acoustics, so speech inversion is a
learnable task on this data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

TV_NAMES = ("LA", "LP", "TBCL", "TBCD", "TTCL", "TTCD", "VP", "Periodicity", "Aperiodicity")
N_TVS = len(TV_NAMES)
PERIODICITY = TV_NAMES.index("Periodicity")

GRAPHEMES = tuple("abdegiklmosu")
SPACE = " "
TV_GRID = np.arange(-2.0, 2.0 + 1e-9, 0.5)
MIN_SEPARATION = 1.0
SMOOTH_SD = 3.0

MAGIC = b"ARTC"
FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
PAYLOAD = "payload.bin"
CONFIG = "corpus.json"

# stream ids for per-corpus randomness derived from the corpus seed
_LEXICON_STREAM = 1
_ACOUSTIC_STREAM = 2
_REFERENCE_OFFSET = 1 << 30
_REFERENCE_SIZE = 500


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Phone:
    grapheme: str
    tv_target: tuple[float, ...]
    duration: tuple[int, int]  # inclusive range, 100 Hz frames


@dataclass(frozen=True)
class PhoneInventory:
    phones: tuple[Phone, ...]

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(p.grapheme for p in self.phones)

    def index(self, grapheme: str) -> int:
        return self.symbols.index(grapheme)

    def encode(self, text: str) -> list[int]:
        lookup = {g: i for i, g in enumerate(self.symbols)}
        return [lookup[c] for c in text]

    def decode(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids)

    def targets(self) -> np.ndarray:
        return np.array([p.tv_target for p in self.phones])


def make_inventory(seed: int) -> PhoneInventory:
    """Twelve graphemes plus a neutral word separator.

    TV targets are drawn from a 0.5-spaced grid in [-2, 2] and kept only if
    they sit at least ``MIN_SEPARATION`` (L-inf) from every earlier target,
    including the all-zero separator target.
    """
    rng = np.random.default_rng([seed, 0])
    chosen = [np.zeros(N_TVS)]
    phones = []
    for g in GRAPHEMES:
        while True:
            cand = rng.choice(TV_GRID, size=N_TVS)
            if all(np.abs(cand - c).max() >= MIN_SEPARATION for c in chosen):
                break
        chosen.append(cand)
        lo = int(rng.integers(6, 9))
        phones.append(Phone(g, tuple(float(v) for v in cand), (lo, lo + 6)))
    phones.append(Phone(SPACE, (0.0,) * N_TVS, (6, 10)))
    return PhoneInventory(tuple(phones))


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 100
    seed: int = 0
    min_words: int = 2
    max_words: int = 4
    lexicon_size: int = 40
    acoustic_noise_sd: float = 0.1
    tv_jitter_sd: float = 0.05
    feature_dim: int = 20
    distractor_dims: int = 4
    index_offset: int = 0

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if not self.feature_dim > self.distractor_dims >= 0:
            raise ValueError("need feature_dim > distractor_dims >= 0")
        if self.acoustic_noise_sd < 0 or self.tv_jitter_sd < 0:
            raise ValueError("noise levels must be non-negative")
        if self.lexicon_size < 1:
            raise ValueError("lexicon_size must be >= 1")


@dataclass
class Utterance:
    id: str
    transcript: str
    tvs_100: np.ndarray
    tvs_50: np.ndarray
    features: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    config: CorpusConfig
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def inventory(self) -> PhoneInventory:
        return make_inventory(self.config.seed)

    def transcripts(self) -> list[str]:
        return [u.transcript for u in self.utterances]

    def subset(self, n: int, seed: int) -> "Corpus":
        """First ``n`` utterances of a seed-determined permutation (nested in n)."""
        if not 1 <= n <= len(self):
            raise ValueError(f"subset size {n} outside 1..{len(self)}")
        order = np.random.default_rng(seed).permutation(len(self))
        return Corpus(self.config, [self.utterances[i] for i in order[:n]])


@lru_cache(maxsize=16)
def make_lexicon(seed: int, size: int) -> tuple[tuple[str, ...], np.ndarray]:
    """Word list and Zipf-like sampling probabilities for a corpus seed."""
    rng = np.random.default_rng([seed, _LEXICON_STREAM])
    words: list[str] = []
    while len(words) < size:
        n = int(rng.integers(2, 6))
        w = "".join(rng.choice(GRAPHEMES, size=n))
        # a doubled grapheme is one long phone, recoverable only from duration
        if w not in words and all(a != b for a, b in zip(w, w[1:])):
            words.append(w)
    weights = 1.0 / np.arange(1, size + 1)
    return tuple(words), weights / weights.sum()


@lru_cache(maxsize=16)
def acoustic_map(seed: int, feature_dim: int, distractor_dims: int):
    """Fixed TV -> feature mixing matrix, offset and excitation rates."""
    rng = np.random.default_rng([seed, _ACOUSTIC_STREAM])
    n_driven = feature_dim - distractor_dims
    M = rng.normal(0.0, 0.8 / np.sqrt(N_TVS), size=(N_TVS, n_driven))
    b = rng.normal(0.0, 0.2, size=n_driven)
    omega = rng.uniform(0.3, 1.2, size=n_driven)
    phase = rng.uniform(0.0, 2 * np.pi, size=n_driven)
    return M, b, omega, phase


def utterance_rng(cfg: CorpusConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(cfg.seed ^ (cfg.index_offset + index))


def _sample_transcript(cfg: CorpusConfig, rng: np.random.Generator) -> str:
    words, probs = make_lexicon(cfg.seed, cfg.lexicon_size)
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    picks = rng.choice(len(words), size=n, p=probs)
    return " ".join(words[i] for i in picks)


def _raw_tvs(inv: PhoneInventory, transcript: str, cfg: CorpusConfig,
             rng: np.random.Generator) -> np.ndarray:
    """Un-normalized 100 Hz trajectory with edge silences, smoothing and jitter."""
    lookup = {p.grapheme: p for p in inv.phones}
    segments = [np.zeros((int(rng.integers(4, 9)), N_TVS))]
    for ch in transcript:
        ph = lookup[ch]
        dur = int(rng.integers(ph.duration[0], ph.duration[1] + 1))
        segments.append(np.tile(ph.tv_target, (dur, 1)))
    segments.append(np.zeros((int(rng.integers(4, 9)), N_TVS)))
    tv = np.concatenate(segments)
    tv = gaussian_filter1d(tv, SMOOTH_SD, axis=0, mode="nearest")
    if cfg.tv_jitter_sd > 0:
        tv = tv + rng.normal(0.0, cfg.tv_jitter_sd, size=tv.shape)
    return tv


@lru_cache(maxsize=16)
def tv_normalizer(cfg: CorpusConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/sd from a fixed reference sample of the same language.

    Shared by every corpus with the same seed and TV settings, so train and
    evaluation sets are normalized identically.
    """
    ref = replace(cfg, index_offset=_REFERENCE_OFFSET, acoustic_noise_sd=0.0)
    inv = make_inventory(cfg.seed)
    chunks = []
    for i in range(_REFERENCE_SIZE):
        rng = utterance_rng(ref, i)
        chunks.append(_raw_tvs(inv, _sample_transcript(ref, rng), ref, rng))
    allv = np.concatenate(chunks)
    return allv.mean(axis=0), allv.std(axis=0)


def downsample_pairs(tv: np.ndarray) -> np.ndarray:
    """100 Hz -> 50 Hz by averaging consecutive frame pairs; a trailing odd frame is dropped."""
    n = tv.shape[0] // 2
    return 0.5 * (tv[0 : 2 * n : 2] + tv[1 : 2 * n : 2])


def tv_to_features(tvs_50: np.ndarray, cfg: CorpusConfig) -> np.ndarray:
    """Noise-free acoustic features of the TV-driven dimensions."""
    M, b, omega, phase = acoustic_map(cfg.seed, cfg.feature_dim, cfg.distractor_dims)
    n = np.arange(tvs_50.shape[0])[:, None]
    voicing = 0.5 * (1.0 + np.tanh(tvs_50[:, PERIODICITY : PERIODICITY + 1]))
    return np.tanh(tvs_50 @ M + b) + 0.3 * voicing * np.sin(omega * n + phase)


def synth_utterance(inv: PhoneInventory, cfg: CorpusConfig, rng: np.random.Generator,
                    uid: str = "utt") -> Utterance:
    transcript = _sample_transcript(cfg, rng)
    mu, sd = tv_normalizer(replace(cfg, n_utterances=1, index_offset=0, acoustic_noise_sd=0.0))
    tvs_100 = (_raw_tvs(inv, transcript, cfg, rng) - mu) / sd
    tvs_50 = downsample_pairs(tvs_100)
    driven = tv_to_features(tvs_50, cfg)
    if cfg.acoustic_noise_sd > 0:
        driven = driven + rng.normal(0.0, cfg.acoustic_noise_sd, size=driven.shape)
    distract = rng.normal(0.0, 1.0, size=(tvs_50.shape[0], cfg.distractor_dims))
    features = np.concatenate([driven, distract], axis=1)
    # durations are >= 2 frames at 50 Hz per grapheme, so CTC feasibility always holds
    return Utterance(uid, transcript, tvs_100.astype(np.float32), tvs_50.astype(np.float32),
                     features.astype(np.float32))


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    cfg.validate()
    inv = make_inventory(cfg.seed)
    utts = [synth_utterance(inv, cfg, utterance_rng(cfg, i), f"s{cfg.seed}-{cfg.index_offset + i:07d}")
            for i in range(cfg.n_utterances)]
    return Corpus(cfg, utts)


# ---------------------------------------------------------------------------
# on-disk format: JSON Lines manifest + binary float32 sidecar


def write_corpus(corpus: Corpus, path) -> list[dict]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = len(MAGIC) + 4
    with open(path / PAYLOAD, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for u in corpus.utterances:
            offsets = {}
            for key in ("tvs_100", "tvs_50", "features"):
                raw = np.ascontiguousarray(getattr(u, key), dtype="<f4").tobytes()
                offsets[key] = offset
                fh.write(raw)
                offset += len(raw)
            manifest.append({"id": u.id, "transcript": u.transcript,
                             "n_frames_100": int(u.tvs_100.shape[0]),
                             "n_frames_50": int(u.tvs_50.shape[0]), "offsets": offsets})
    with open(path / MANIFEST, "w", encoding="utf-8") as fh:
        for row in manifest:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (path / CONFIG).write_text(json.dumps(asdict(corpus.config), indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(path) -> Corpus:
    path = Path(path)
    if not (path / MANIFEST).exists() or not (path / PAYLOAD).exists():
        raise FileNotFoundError(f"no corpus at {path}")
    cfg = CorpusConfig(**json.loads((path / CONFIG).read_text()))
    rows = [json.loads(line) for line in (path / MANIFEST).read_text(encoding="utf-8").splitlines() if line]
    blob = (path / PAYLOAD).read_bytes()
    if blob[:4] != MAGIC:
        raise CorpusFormatError("bad magic in corpus payload")
    if len(blob) < 8:
        raise CorpusFormatError("truncated corpus payload header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus format version {version}")

    widths = {"tvs_100": N_TVS, "tvs_50": N_TVS, "features": cfg.feature_dim}
    utts = []
    expected = 8
    for row in rows:
        arrays = {}
        for key in ("tvs_100", "tvs_50", "features"):
            n = row["n_frames_100"] if key == "tvs_100" else row["n_frames_50"]
            nbytes = n * widths[key] * 4
            start = row["offsets"][key]
            if start != expected:
                raise CorpusFormatError(
                    f"utterance {row['id']}: {key} at byte {start}, expected {expected} "
                    "(manifest and payload lengths disagree)")
            end = start + nbytes
            if end > len(blob):
                raise CorpusFormatError(
                    f"utterance {row['id']}: truncated payload, needs bytes {start}..{end} "
                    f"but file has {len(blob)}")
            arrays[key] = np.frombuffer(blob[start:end], dtype="<f4").reshape(n, widths[key]).astype(np.float32)
            expected = end
        utts.append(Utterance(row["id"], row["transcript"], **arrays))
    if expected != len(blob):
        raise CorpusFormatError(
            f"payload has {len(blob) - expected} trailing bytes after utterance "
            f"{rows[-1]['id'] if rows else '<none>'} (manifest and payload lengths disagree)")
    return Corpus(cfg, utts)
