"""Audio and audio-visual Taris: windowed encoders, word-count gate, segment-masked
decoder and the composite training objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import segmentation as seg
from .config import ConfigError, TarisConfig
from .diffcore import DiffArray
from .transformer import BOS, VOCAB, StackConfig, attention, decode, encode, glorot, init_decoder, init_encoder

CAP_PER_WORD = 15


@dataclass
class TarisModel:
    config: TarisConfig
    params: dict[str, DiffArray]

    @classmethod
    def init(cls, config: TarisConfig, seed: int | None = None) -> "TarisModel":
        config.validate()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        stack = stack_config(config)
        h = config.hidden
        params = init_encoder(rng, stack, config.d_audio, "enc")
        if config.modality == "av":
            params.update(init_encoder(rng, stack, config.d_video, "venc"))
            if config.fusion == "concat":
                params["fuse.w"] = DiffArray(glorot(rng, 2 * h, h), True, "fuse.w")
                params["fuse.b"] = DiffArray(np.zeros(h), True, "fuse.b")
        params["gate.w"] = DiffArray(glorot(rng, h, 1), True, "gate.w")
        params["gate.b"] = DiffArray(np.zeros(1), True, "gate.b")
        params.update(init_decoder(rng, stack, "dec"))
        return cls(config, params)

    @property
    def stack(self) -> StackConfig:
        return stack_config(self.config)

    def names(self) -> list[str]:
        return sorted(self.params)

    def param_list(self) -> list[DiffArray]:
        return [self.params[k] for k in self.names()]

    def encoder_spec(self) -> seg.ConnectivitySpec:
        return seg.ConnectivitySpec(self.config.e_lb, self.config.e_la)

    def video_spec(self) -> seg.ConnectivitySpec:
        return seg.ConnectivitySpec(self.config.video_e_lb, self.config.video_e_la)

    def segment_spec(self, look_ahead: float | None = None) -> seg.SegmentSpec:
        la = self.config.d_la if look_ahead is None else look_ahead
        return seg.SegmentSpec(self.config.d_lb, la)


def stack_config(config: TarisConfig) -> StackConfig:
    return StackConfig(layers=config.layers, hidden=config.hidden, d_ff=config.dff,
                       dropout=config.dropout, vocab=VOCAB)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    audio: np.ndarray        # [B, N, d_a]
    audio_len: np.ndarray    # [B]
    video: np.ndarray | None  # [B, M, d_v]
    video_len: np.ndarray | None
    dec_in: np.ndarray       # [B, L] BOS + shifted targets
    targets: np.ndarray      # [B, L]
    target_len: np.ndarray   # [B]

    @property
    def size(self) -> int:
        return len(self.audio_len)

    def space_counts(self) -> np.ndarray:
        return np.array([(self.targets[b, :n] == seg.SPACE).sum() for b, n in enumerate(self.target_len)],
                        dtype=np.float64)


def make_batch(audio_list, transcripts, video_list=None) -> Batch:
    """Pad a list of utterances into one batch.  Transcripts are id sequences."""
    b = len(audio_list)
    n = max(len(a) for a in audio_list)
    audio = np.zeros((b, n, np.shape(audio_list[0])[1]))
    for i, a in enumerate(audio_list):
        audio[i, :len(a)] = a
    video = video_len = None
    if video_list is not None:
        m = max(len(v) for v in video_list)
        video = np.zeros((b, m, np.shape(video_list[0])[1]))
        for i, v in enumerate(video_list):
            video[i, :len(v)] = v
        video_len = np.array([len(v) for v in video_list])
    lengths = [len(t) for t in transcripts]
    if min(lengths) < 1:
        raise ValueError("transcripts must hold at least one grapheme")
    length = max(lengths)
    targets = np.zeros((b, length), dtype=np.int64)
    dec_in = np.full((b, length), BOS, dtype=np.int64)
    for i, t in enumerate(transcripts):
        targets[i, :len(t)] = t
        dec_in[i, 1:len(t)] = t[:-1]
    return Batch(audio, np.array([len(a) for a in audio_list]), video, video_len,
                 dec_in, targets, np.array(lengths))


# ---------------------------------------------------------------------------
# masks with padding


def _self_bias(lengths: np.ndarray, n: int, spec: seg.ConnectivitySpec) -> np.ndarray:
    window = seg.allowed_from_bias(seg.encoder_window_mask(n, spec))
    valid = np.arange(n)[None, :] < lengths[:, None]
    # padded query rows keep their window so that no row is empty
    allowed = window[None] & (valid[:, None, :] | ~valid[:, :, None])
    return seg.bias_from_allowed(allowed)


def _av_bias(audio_len, video_len, n: int, m: int, half_width: int, ratio) -> np.ndarray:
    allowed = np.zeros((len(audio_len), n, m), dtype=bool)
    allowed[:, :, 0] = True
    for b, (nb, mb) in enumerate(zip(audio_len, video_len)):
        allowed[b, :nb] = False
        allowed[b, :nb, :mb] = seg.allowed_from_bias(seg.av_mask(int(nb), int(mb), half_width, ratio))
    return seg.bias_from_allowed(allowed)


def _cross_bias(dec_in, target_len, segment_ids, audio_len, spec: seg.SegmentSpec):
    b, length = dec_in.shape
    n = segment_ids.shape[1]
    allowed = np.zeros((b, length, n), dtype=bool)
    allowed[:, :, 0] = True
    empty_rows = 0
    for i in range(b):
        lt, nb = int(target_len[i]), int(audio_len[i])
        w = seg.word_indices(dec_in[i, :lt])
        bias, empty = seg.segment_mask(w, segment_ids[i, :nb], spec)
        allowed[i, :lt] = False
        allowed[i, :lt, :nb] = seg.allowed_from_bias(bias)
        empty_rows += int(empty.sum())
    return seg.bias_from_allowed(allowed), empty_rows


# ---------------------------------------------------------------------------
# forward pass


def gate_alpha(encodings, model: TarisModel) -> DiffArray:
    """Per-frame gate values from encoder (or fused) outputs, [..., N]."""
    z = encodings @ model.params["gate.w"] + model.params["gate.b"]
    z = dc.reshape(z, z.shape[:-1])
    kind = model.config.gate
    if kind == "sigmoid":
        return dc.sigmoid(z)
    if kind == "scaled-sigmoid":
        return dc.sigmoid(z * model.config.gate_k)
    return dc.tanh(z)


def av_fuse(o_a, o_v, half_width: int, mode: str, model: TarisModel | None = None, *,
            bias=None, ratio=None, training: bool = False, rng=None) -> DiffArray:
    """Windowed cross-modal attention from audio to video followed by fusion.

    ``o_a`` is [N, h] or [B, N, h].  When ``bias`` is omitted it is built from the
    stream lengths with :func:`segmentation.av_mask`.
    """
    if bias is None:
        bias = seg.av_mask(o_a.shape[-2], o_v.shape[-2], half_width, ratio)
    rate = model.config.dropout if model is not None else 0.0
    c_v = attention(o_a, o_v, o_v, bias, dropout=rate, rng=rng, training=training)
    if mode == "add":
        return o_a + c_v
    if mode == "concat":
        return dc.concat([o_a, c_v], axis=-1) @ model.params["fuse.w"] + model.params["fuse.b"]
    raise ConfigError(f"unknown fusion mode {mode!r}")


@dataclass
class ForwardTrace:
    o_a: DiffArray
    memory: DiffArray              # o_a, or the fused o_av for audio-visual models
    alpha: DiffArray               # [B, N], zero on padded frames
    gates: list[seg.GateTrace]
    logits: DiffArray              # [B, L, vocab]
    cross_bias: np.ndarray
    empty_rows: int = 0
    o_v: DiffArray | None = None
    extras: dict = field(default_factory=dict)


def encode_memory(model: TarisModel, batch: Batch, training: bool = False, rng=None):
    """Encoder side of the model: returns (o_a, memory, alpha, o_v)."""
    cfg = model.config
    stack = model.stack
    n = batch.audio.shape[1]
    o_a = encode(batch.audio, _self_bias(batch.audio_len, n, model.encoder_spec()),
                 model.params, stack, training, rng, prefix="enc")
    o_v = None
    memory = o_a
    if cfg.modality == "av":
        if batch.video is None:
            raise ConfigError("audio-visual model requires a video stream")
        m = batch.video.shape[1]
        o_v = encode(batch.video, _self_bias(batch.video_len, m, model.video_spec()),
                     model.params, stack, training, rng, prefix="venc")
        bias = _av_bias(batch.audio_len, batch.video_len, n, m, cfg.window_b, cfg.av_ratio)
        memory = av_fuse(o_a, o_v, cfg.window_b, cfg.fusion, model, bias=bias, training=training, rng=rng)
    valid = (np.arange(n)[None, :] < batch.audio_len[:, None]).astype(np.float64)
    alpha = gate_alpha(memory, model) * valid
    return o_a, memory, alpha, o_v


def forward(model: TarisModel, batch: Batch, training: bool = False, rng=None) -> ForwardTrace:
    """Teacher-forced forward pass over a padded batch."""
    o_a, memory, alpha, o_v = encode_memory(model, batch, training, rng)
    gates = [seg.GateTrace.from_alpha(alpha.value[b, :nb]) for b, nb in enumerate(batch.audio_len)]
    segment_ids = np.zeros(alpha.shape, dtype=np.int64)
    for b, g in enumerate(gates):
        segment_ids[b, :len(g.segment_ids)] = g.segment_ids
    cross, empty = _cross_bias(batch.dec_in, batch.target_len, segment_ids, batch.audio_len,
                               model.segment_spec())
    self_bias = seg.causal_mask(batch.dec_in.shape[1])
    logits = decode(batch.dec_in, memory, self_bias, cross, model.params, model.stack,
                    training, rng, prefix="dec")
    return ForwardTrace(o_a, memory, alpha, gates, logits, cross, empty, o_v)


def word_loss(alpha, transcript) -> DiffArray:
    """Squared gap between the SPACE count and the un-floored gate sum."""
    count = float(np.sum(np.asarray(transcript) == seg.SPACE))
    return dc.square(count - dc.sum(alpha))


def total_loss(trace: ForwardTrace, batch: Batch, lam: float):
    """Cross-entropy plus ``lam`` times the word loss, averaged over the batch.

    Returns the scalar loss and a dict with the per-part values.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    b, length = batch.targets.shape
    valid = np.arange(length)[None, :] < batch.target_len[:, None]
    weights = valid / (batch.target_len[:, None] * b)
    probs = dc.softmax_with_bias(trace.logits)
    ce = dc.cross_entropy(probs, batch.targets, weights)
    gap = batch.space_counts() - dc.sum(trace.alpha, axis=1)
    wl = dc.mean(dc.square(gap))
    loss = ce + wl * lam
    return loss, {"ce": float(ce.value), "word": float(wl.value), "loss": float(loss.value)}


# ---------------------------------------------------------------------------
# inference


def single_batch(audio, transcript=None, video=None) -> Batch:
    transcript = [seg.SPACE] if transcript is None or len(transcript) == 0 else list(transcript)
    return make_batch([np.asarray(audio)], [np.asarray(transcript)],
                      None if video is None else [np.asarray(video)])


def next_token_logits(model: TarisModel, memory: np.ndarray, segment_ids: np.ndarray, tokens,
                      look_ahead: float | None = None) -> np.ndarray:
    """Logits for the grapheme following ``tokens`` given an encoder memory [N, h].

    A grapheme's word index is the number of SPACEs emitted before it.
    """
    dec_in = np.array([BOS] + list(tokens), dtype=np.int64)
    w = seg.word_indices(dec_in)
    cross, _ = seg.segment_mask(w, segment_ids, model.segment_spec(look_ahead))
    logits = decode(dec_in[None], DiffArray(memory[None]), seg.causal_mask(len(dec_in)), cross[None],
                    model.params, model.stack, False, None, prefix="dec")
    return logits.value[0, -1]


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool
    gate: seg.GateTrace

    @property
    def text(self) -> str:
        return seg.ids_to_text(self.tokens)


def word_budget(gate: seg.GateTrace, rule: str = "round") -> int:
    """Index of the last word the decoder may emit.

    ``floor`` uses the final segment index; ``round`` rounds the gate sum to the
    nearest integer, so a sum of 2.97 still licenses a fourth word.
    """
    if not len(gate.cumsum):
        return -1
    total = float(gate.cumsum[-1])
    return int(math.floor(total + 0.5)) if rule == "round" else int(math.floor(total))


def greedy_decode_offline(model: TarisModel, audio, video=None) -> DecodeResult:
    """Argmax decoding over the whole utterance.

    Decoding stops when the decoder predicts SPACE after the last permitted word
    (see :func:`word_budget`), or at ``15 * (budget + 1)`` graphemes.
    """
    batch = single_batch(audio, None, video)
    _, memory, alpha, _ = encode_memory(model, batch)
    gate = seg.GateTrace.from_alpha(alpha.value[0])
    return greedy_from_memory(model, memory.value[0], gate)


def greedy_from_memory(model: TarisModel, memory: np.ndarray, gate: seg.GateTrace) -> DecodeResult:
    last = word_budget(gate, model.config.budget_rule)
    cap = CAP_PER_WORD * (last + 1)
    tokens: list[int] = []
    spaces = 0
    while True:
        if len(tokens) >= cap:
            return DecodeResult(tokens, True, gate)
        token = int(np.argmax(next_token_logits(model, memory, gate.segment_ids, tokens)))
        if token == seg.SPACE and spaces >= last:
            return DecodeResult(tokens, False, gate)
        tokens.append(token)
        spaces += token == seg.SPACE
