"""Synthetic audio-visual corpus with exact word boundaries.

Each lexicon word owns a random audio template (T_w frames) and a video template
at half the frame rate.  Sentences concatenate word templates with timing jitter
and small perturbations; noise is mixed into the audio stream at a target SNR.

Corpus files use a little-endian binary layout:
``b"TARISDS1"`` then, per sample, ``u32 N, u32 M, u32 L, u16 d_a, u16 d_v``,
f32 audio [N, d_a], f32 video [M, d_v], u8 transcript [L], ``u32 W`` and W pairs
of u32 (start, end) frames.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .segmentation import SPACE, ids_to_text, text_to_ids

MAGIC = b"TARISDS1"
_HEADER = struct.Struct("<IIIHH")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


class CorpusError(Exception):
    pass


@dataclass
class Lexicon:
    words: list[str]
    audio: list[np.ndarray]
    video: list[np.ndarray]
    seed: int

    def __len__(self) -> int:
        return len(self.words)

    @property
    def d_audio(self) -> int:
        return self.audio[0].shape[1]

    @property
    def d_video(self) -> int:
        return self.video[0].shape[1]


@dataclass
class SyntheticSample:
    audio: np.ndarray
    video: np.ndarray
    transcript: np.ndarray
    boundaries: np.ndarray  # [W, 2] half-open (start, end) frames

    @property
    def text(self) -> str:
        return ids_to_text(self.transcript)

    @property
    def word_lengths(self) -> np.ndarray:
        return self.boundaries[:, 1] - self.boundaries[:, 0]


def _random_word(rng: np.random.Generator) -> str:
    n = int(rng.integers(3, 9))
    letters = [LETTERS[i] for i in rng.integers(0, 26, size=n)]
    # occasional contraction such as "don't"
    if n >= 4 and rng.random() < 0.1:
        letters[int(rng.integers(1, n - 1))] = "'"
    return "".join(letters)


def build_lexicon(seed: int, vocab_size: int = 20, d_a: int = 16, d_v: int = 16,
                  length_range: tuple[int, int] = (4, 8)) -> Lexicon:
    """Random unique words with unit-variance templates; ``length_range`` is inclusive."""
    lo, hi = length_range
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if not 2 <= lo <= hi <= 40:
        raise ValueError("length_range must lie within [2, 40]")
    rng = np.random.default_rng([seed, 0])
    words: list[str] = []
    while len(words) < vocab_size:
        w = _random_word(rng)
        if w not in words:
            words.append(w)
    audio, video = [], []
    for _ in words:
        t = int(rng.integers(lo, hi + 1))
        audio.append(rng.standard_normal((t, d_a)))
        video.append(rng.standard_normal((math.ceil(t / 2), d_v)))
    return Lexicon(words, audio, video, seed)


def synthesize_sentence(lexicon: Lexicon, seed, word_count_range: tuple[int, int] = (3, 8),
                        informativeness: float = 1.0, silence_rate: float = 0.0) -> SyntheticSample:
    """One clean sentence of ``word_count_range`` (inclusive) random lexicon words."""
    rng = np.random.default_rng(seed)
    n_words = int(rng.integers(word_count_range[0], word_count_range[1] + 1))
    choice = rng.integers(0, len(lexicon), size=n_words)
    pieces, owners, spans = [], [], []
    start = 0
    for k, wid in enumerate(choice):
        tmpl = lexicon.audio[wid]
        jitter = int(rng.integers(-1, 2))
        if jitter < 0 and len(tmpl) > 2:
            tmpl = tmpl[:-1]
        elif jitter > 0:
            tmpl = np.vstack([tmpl, tmpl[-1:]])
        frames = tmpl + 0.05 * rng.standard_normal(tmpl.shape)
        if silence_rate > 0 and k < n_words - 1 and rng.random() < silence_rate:
            gap = int(rng.integers(1, 4))
            frames = np.vstack([frames, 0.05 * rng.standard_normal((gap, tmpl.shape[1]))])
            owners.extend([wid] * len(tmpl) + [-1] * gap)
        else:
            owners.extend([wid] * len(tmpl))
        pieces.append(frames)
        spans.append((start, start + len(frames)))
        start += len(frames)
    audio = np.vstack(pieces)
    n = len(audio)
    m = math.ceil(n / 2)
    video = np.empty((m, lexicon.d_video))
    for j in range(m):
        a = 2 * j
        k = next(i for i, (s, e) in enumerate(spans) if s <= a < e)
        wid = owners[a]
        if wid < 0:
            video[j] = 0.05 * rng.standard_normal(lexicon.d_video)
            continue
        tmpl = lexicon.video[wid]
        video[j] = tmpl[min((a - spans[k][0]) // 2, len(tmpl) - 1)]
    video += 0.05 * rng.standard_normal(video.shape)
    if informativeness < 1.0:
        noise = rng.standard_normal(video.shape)
        video = math.sqrt(informativeness) * video + math.sqrt(1.0 - informativeness) * noise
    text = " ".join(lexicon.words[w] for w in choice)
    return SyntheticSample(audio, video, np.array(text_to_ids(text), dtype=np.int64),
                           np.array(spans, dtype=np.int64))


def mix_noise(sample: SyntheticSample, snr_db: float, seed) -> SyntheticSample:
    """Add white Gaussian noise to the audio stream at ``snr_db``; video is untouched."""
    if math.isinf(snr_db) and snr_db > 0:
        return sample
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    rng = np.random.default_rng(seed)
    power = float(np.mean(sample.audio ** 2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    audio = sample.audio + sigma * rng.standard_normal(sample.audio.shape)
    return SyntheticSample(audio, sample.video, sample.transcript, sample.boundaries)


# ---------------------------------------------------------------------------
# binary format


def write_sample(fh: BinaryIO, sample: SyntheticSample) -> None:
    n, d_a = sample.audio.shape
    m, d_v = sample.video.shape
    fh.write(_HEADER.pack(n, m, len(sample.transcript), d_a, d_v))
    fh.write(np.ascontiguousarray(sample.audio, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(sample.video, dtype="<f4").tobytes())
    fh.write(np.asarray(sample.transcript, dtype=np.uint8).tobytes())
    fh.write(struct.pack("<I", len(sample.boundaries)))
    fh.write(np.asarray(sample.boundaries, dtype="<u4").tobytes())


def write_corpus(path: str | Path, samples) -> None:
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(MAGIC)
            for s in samples:
                write_sample(fh, s)
    except OSError as exc:
        raise CorpusError(f"cannot write corpus {path}: {exc}") from exc


def _read_exact(fh: BinaryIO, size: int, path) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CorpusError(f"truncated corpus file {path}")
    return data


def iter_corpus(source: str | Path | BinaryIO) -> Iterator[SyntheticSample]:
    """Yield samples from a corpus file path or an open binary stream."""
    if isinstance(source, (str, Path)):
        try:
            fh = open(source, "rb")
        except OSError as exc:
            raise CorpusError(f"cannot open corpus {source}: {exc}") from exc
        with fh:
            yield from iter_corpus(fh)
        return
    fh, path = source, getattr(source, "name", "<stream>")
    if fh.read(len(MAGIC)) != MAGIC:
        raise CorpusError(f"bad magic in corpus {path}")
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return
        if len(head) != _HEADER.size:
            raise CorpusError(f"truncated corpus file {path}")
        n, m, length, d_a, d_v = _HEADER.unpack(head)
        audio = np.frombuffer(_read_exact(fh, 4 * n * d_a, path), dtype="<f4").reshape(n, d_a)
        video = np.frombuffer(_read_exact(fh, 4 * m * d_v, path), dtype="<f4").reshape(m, d_v)
        transcript = np.frombuffer(_read_exact(fh, length, path), dtype=np.uint8)
        if transcript.size and transcript.max() > 27:
            raise CorpusError(f"transcript symbol out of range in {path}")
        (w,) = struct.unpack("<I", _read_exact(fh, 4, path))
        spans = np.frombuffer(_read_exact(fh, 8 * w, path), dtype="<u4").reshape(w, 2)
        yield SyntheticSample(audio.astype(np.float64), video.astype(np.float64),
                              transcript.astype(np.int64), spans.astype(np.int64))


def read_corpus(source) -> list[SyntheticSample]:
    return list(iter_corpus(source))


def make_corpus(out_dir: str | Path, lexicon: Lexicon, n_train: int, n_test: int,
                snr_db: float = math.inf, video_informativeness: float = 1.0, seed: int = 0,
                word_count_range: tuple[int, int] = (3, 8), silence_rate: float = 0.0) -> dict:
    """Write ``train.bin``, ``test.bin`` and ``manifest.json`` under ``out_dir``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("split sizes must be >= 1")
    if not 0.0 <= video_informativeness <= 1.0:
        raise ValueError("video_informativeness must lie in [0, 1]")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create {out}: {exc}") from exc
    for split, count, tag in (("train", n_train, 1), ("test", n_test, 2)):
        samples = []
        for i in range(count):
            s = synthesize_sentence(lexicon, [seed, tag, i], word_count_range,
                                    video_informativeness, silence_rate)
            samples.append(mix_noise(s, snr_db, [seed, tag, i, 7]))
        write_corpus(out / f"{split}.bin", samples)
    manifest = {
        "format": "TARISDS1",
        "seed": seed,
        "lexicon_seed": lexicon.seed,
        "vocab_size": len(lexicon),
        "words": lexicon.words,
        "d_audio": lexicon.d_audio,
        "d_video": lexicon.d_video,
        "template_frames": [len(a) for a in lexicon.audio],
        "n_train": n_train,
        "n_test": n_test,
        "snr_db": snr_db if math.isfinite(snr_db) else "inf",
        "video_informativeness": video_informativeness,
        "word_count_range": list(word_count_range),
        "silence_rate": silence_rate,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(corpus_dir: str | Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc


def space_count(sample: SyntheticSample) -> int:
    return int(np.sum(sample.transcript == SPACE))
