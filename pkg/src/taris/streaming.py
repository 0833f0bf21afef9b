"""Incremental decoding while frames arrive, with latency accounting.

Encoder positions are committed layer by layer once every input frame inside
their receptive field has arrived; committed rows are cached and never
recomputed.  The gate accumulates over committed frames only and the decoder
emits a word once the segments it may look at are complete (``final`` mode), or
emits provisional versions as look-ahead segments appear (``eager`` mode).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import segmentation as seg
from .diffcore import DiffArray
from .model import CAP_PER_WORD, TarisModel, av_fuse, gate_alpha, next_token_logits, word_budget
from .transformer import encoder_input, encoder_layer, encoder_output

MODES = ("final", "eager")


class StreamError(RuntimeError):
    pass


def receptive_field(layer: int, e_la: float, e_lb: float, k: int, n: int | None = None):
    """Input frames (first, last) that can influence position ``k`` after ``layer`` layers."""
    if layer < 1:
        raise ValueError("layer must be >= 1")
    first = 0 if math.isinf(e_lb) else max(0, k - layer * int(e_lb))
    last = math.inf if math.isinf(e_la) else k + layer * int(e_la)
    if n is not None:
        last = min(last, n - 1)
    return first, (last if math.isinf(last) else int(last))


@dataclass
class Event:
    frame_index: int
    event: str
    payload: dict

    def to_record(self, one_based: bool = True) -> dict:
        return {"frame_index": self.frame_index + (1 if one_based else 0), "event": self.event,
                "payload": self.payload}


@dataclass
class WordRecord:
    index: int
    text: str = ""
    versions: int = 0
    first_emit_frame: int = -1
    final_emit_frame: int = -1
    crossing_frame: int = -1


@dataclass
class LatencyReport:
    mode: str
    frame_ms: float
    delays: list[int] = field(default_factory=list)
    revisions: list[int] = field(default_factory=list)

    @property
    def delays_ms(self) -> list[float]:
        return [d * self.frame_ms for d in self.delays]

    def summary(self) -> dict:
        if not self.delays:
            return {"mode": self.mode, "words": 0}
        d = np.asarray(self.delays, dtype=np.float64)
        return {
            "mode": self.mode,
            "words": len(d),
            "mean_delay_frames": float(d.mean()),
            "p50_delay_frames": float(np.percentile(d, 50)),
            "p90_delay_frames": float(np.percentile(d, 90)),
            "mean_delay_ms": float(d.mean() * self.frame_ms),
            "mean_revisions": float(np.mean(self.revisions)),
            "max_revisions": int(max(self.revisions)),
        }


class _Encoder:
    """Layer-wise committed cache for one encoder stack."""

    def __init__(self, model: TarisModel, prefix: str, spec: seg.ConnectivitySpec):
        self.model = model
        self.prefix = prefix
        self.look_back = spec.look_back
        self.look_ahead = spec.look_ahead
        self.frames: list[np.ndarray] = []
        self.layers: list[list[np.ndarray]] = [[] for _ in range(model.config.layers + 1)]
        self.out: list[np.ndarray] = []

    @property
    def committed(self) -> int:
        return len(self.out)

    def _rows(self, layer: int, start: int, stop: int, total: int) -> np.ndarray:
        prev = np.asarray(self.layers[layer - 1])
        lo = 0 if math.isinf(self.look_back) else max(0, start - int(self.look_back))
        hi = total if math.isinf(self.look_ahead) else min(total, stop - 1 + int(self.look_ahead) + 1)
        q = np.arange(start, stop)[:, None]
        k = np.arange(lo, hi)[None, :]
        bias = seg.bias_from_allowed((k >= q - self.look_back) & (k <= q + self.look_ahead))
        out = encoder_layer(DiffArray(prev[start:stop]), DiffArray(prev[lo:hi]), bias,
                            self.model.params, self.prefix, layer - 1, self.model.stack)
        return out.value

    def advance(self, ended: bool) -> int:
        """Commit every position whose receptive field is available; returns the new count."""
        n = len(self.frames)
        done = len(self.layers[0])
        if n > done:
            x = encoder_input(DiffArray(np.asarray(self.frames[done:])), self.model.params,
                              self.prefix, offset=done)
            self.layers[0].extend(x.value)
        for layer in range(1, len(self.layers)):
            avail = len(self.layers[layer - 1])
            if ended:
                target = avail
            elif math.isinf(self.look_ahead):
                target = len(self.layers[layer])
            else:
                target = max(len(self.layers[layer]), avail - int(self.look_ahead))
            start = len(self.layers[layer])
            if target > start:
                self.layers[layer].extend(self._rows(layer, start, target, avail))
        start = len(self.out)
        top = self.layers[-1]
        if len(top) > start:
            out = encoder_output(DiffArray(np.asarray(top[start:])), self.model.params, self.prefix)
            self.out.extend(out.value)
        return len(self.out)


class StreamState:
    """Single-owner incremental decoding state for one utterance."""

    def __init__(self, model: TarisModel, mode: str = "final", verify: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        cfg = model.config
        self.model = model
        self.mode = mode
        self.verify = verify
        self.audio = _Encoder(model, "enc", model.encoder_spec())
        self.video = _Encoder(model, "venc", model.video_spec()) if cfg.modality == "av" else None
        self.memory: list[np.ndarray] = []
        self.alpha: list[float] = []
        self.cumsum: list[float] = []
        self.tokens: list[int] = []
        self.spaces = 0
        self.words: list[WordRecord] = []
        self.pending: WordRecord | None = None
        self.pending_look_ahead = -1
        self.events: list[Event] = []
        self.ended = False
        self.truncated = False

    # -- input side ---------------------------------------------------------

    @property
    def frame_index(self) -> int:
        return len(self.audio.frames) - 1

    @property
    def committed(self) -> int:
        return len(self.memory)

    @property
    def alpha_sum(self) -> float:
        return self.cumsum[-1] if self.cumsum else 0.0

    def ingest(self, audio_frame, video_frames=()) -> "StreamState":
        if self.ended:
            raise StreamError("stream already finalized")
        self.audio.frames.append(np.asarray(audio_frame, dtype=np.float64))
        if self.video is not None:
            self.video.frames.extend(np.asarray(v, dtype=np.float64) for v in video_frames)
        self._commit()
        return self

    def _fusable(self) -> int:
        """Number of leading audio positions whose video window is committed."""
        n_a = self.audio.committed
        if self.video is None:
            return n_a
        cfg = self.model.config
        if self.ended:
            return n_a
        if cfg.av_ratio is None:
            return self.committed
        count = self.committed
        while count < n_a:
            j = max(math.floor((count + 1) * cfg.av_ratio) - 1, 0)
            if j + cfg.window_b + 1 > self.video.committed:
                break
            count += 1
        return count

    def _commit(self) -> None:
        before = self.committed
        self.audio.advance(self.ended)
        if self.video is not None:
            self.video.advance(self.ended)
        target = self._fusable()
        if target > before:
            o_a = np.asarray(self.audio.out[before:target])
            if self.video is None:
                fused = o_a
            else:
                fused = self._fuse(before, target)
            alpha = gate_alpha(DiffArray(fused), self.model).value
            self.memory.extend(fused)
            for a in alpha:
                self.alpha.append(float(a))
                self.cumsum.append((self.cumsum[-1] if self.cumsum else 0.0) + float(a))
            self.events.append(Event(self.frame_index, "commit",
                                     {"committed": self.committed, "alpha_sum": self.alpha_sum}))
        if self.verify:
            self._verify()

    def _fuse(self, start: int, stop: int) -> np.ndarray:
        cfg = self.model.config
        o_v = np.asarray(self.video.out)
        m = len(o_v)
        n = len(self.audio.frames)
        allowed = np.zeros((stop - start, m), dtype=bool)
        for r, i in enumerate(range(start, stop)):
            if self.ended:
                lo, hi = seg.av_window(i, n, m, cfg.window_b, cfg.av_ratio)
            else:
                j = max(math.floor((i + 1) * cfg.av_ratio) - 1, 0)
                lo, hi = max(0, j - cfg.window_b), j + cfg.window_b
            allowed[r, lo:hi + 1] = True
        out = av_fuse(DiffArray(np.asarray(self.audio.out[start:stop])), DiffArray(o_v), cfg.window_b,
                      cfg.fusion, self.model, bias=seg.bias_from_allowed(allowed))
        return out.value

    def _verify(self) -> None:
        """Check committed rows against an offline encode of the frames seen so far."""
        from .model import encode_memory, single_batch

        if not self.memory:
            return
        video = np.asarray(self.video.frames) if self.video is not None else None
        _, memory, _, _ = encode_memory(self.model, single_batch(np.asarray(self.audio.frames), None, video))
        got = np.asarray(self.memory)
        ref = memory.value[0, :len(got)]
        if not np.allclose(got, ref, rtol=1e-9, atol=1e-9):
            raise StreamError("committed encoder output differs from offline recomputation")

    # -- output side --------------------------------------------------------

    def _segment_ids(self) -> np.ndarray:
        return np.floor(np.asarray(self.cumsum)).astype(np.int64)

    def _decode_word(self, look_ahead: float, cap: int, last: int | None):
        """Greedy graphemes of the next word; returns (tokens, status)."""
        memory = np.asarray(self.memory)
        ids = self._segment_ids()
        new: list[int] = []
        while True:
            if len(self.tokens) + len(new) >= cap:
                return new, "cap"
            t = int(np.argmax(next_token_logits(self.model, memory, ids, self.tokens + new, look_ahead)))
            if t == seg.SPACE:
                if last is not None and self.spaces >= last:
                    return new, "stop"
                return new + [t], "done"
            new.append(t)

    def _crossing(self, k: int) -> int:
        ids = self._segment_ids()
        hit = np.nonzero(ids >= k + 1)[0]
        return int(hit[0]) if len(hit) else len(self.audio.frames) - 1

    def _record(self, rec: WordRecord, tokens: list[int], final: bool) -> Event:
        rec.versions += 1
        rec.text = seg.ids_to_text([t for t in tokens if t != seg.SPACE])
        if rec.first_emit_frame < 0:
            rec.first_emit_frame = self.frame_index
            kind = "emit"
        else:
            kind = "revise"
        if final:
            rec.final_emit_frame = self.frame_index
            rec.crossing_frame = self._crossing(rec.index)
        payload = {"word": rec.index, "text": rec.text, "version": rec.versions, "final": final}
        ev = Event(self.frame_index, kind, payload)
        self.events.append(ev)
        return ev

    def _accept(self, rec: WordRecord, tokens: list[int]) -> None:
        self.tokens.extend(tokens)
        self.spaces += tokens.count(seg.SPACE)
        self.words.append(rec)

    def try_decode(self) -> list[Event]:
        """Emit whatever the committed segments allow; returns the new events."""
        start = len(self.events)
        d_la = self.model.config.d_la
        while self.cumsum:
            current = int(self._segment_ids()[-1])
            k = self.spaces
            available = current - k - 1
            if available < 0 or (self.mode == "final" and available < d_la):
                break
            look_ahead = d_la if self.mode == "final" else min(d_la, available)
            cap = CAP_PER_WORD * (current + 1)
            if self.mode == "eager" and self.pending is not None and look_ahead <= self.pending_look_ahead:
                break
            tokens, status = self._decode_word(look_ahead, cap, None)
            if status == "cap":
                break
            rec = self.pending or WordRecord(k)
            final = look_ahead >= d_la
            self._record(rec, tokens, final)
            if final:
                self.pending, self.pending_look_ahead = None, -1
                self._accept(rec, tokens)
            else:
                self.pending, self.pending_look_ahead = rec, look_ahead
                break
        return self.events[start:]

    def finalize(self):
        """Flush at stream end; returns (transcript, LatencyReport)."""
        if not self.ended:
            self.ended = True
            self._commit()
        if self.cumsum:
            self.try_decode()
            last = word_budget(seg.GateTrace.from_alpha(self.alpha), self.model.config.budget_rule)
            cap = CAP_PER_WORD * (last + 1)
            d_la = self.model.config.d_la
            while self.spaces <= last:
                tokens, status = self._decode_word(d_la, cap, last)
                rec = self.pending or WordRecord(self.spaces)
                self.pending = None
                if tokens or status != "stop" or rec.versions:
                    self._record(rec, tokens, True)
                    self._accept(rec, tokens)
                if status == "cap":
                    self.truncated = True
                    break
                if status == "stop":
                    break
        return self.transcript, self.report()

    @property
    def transcript(self) -> str:
        return seg.ids_to_text(self.tokens)

    def report(self) -> LatencyReport:
        rep = LatencyReport(self.mode, self.model.config.frame_ms)
        for rec in self.words:
            if rec.versions == 0:
                continue
            emitted = rec.first_emit_frame if self.mode == "eager" else rec.final_emit_frame
            rep.delays.append(emitted - rec.crossing_frame)
            rep.revisions.append(rec.versions - 1)
        return rep


def iter_stream(model: TarisModel, audio, video=None, mode: str = "final", verify: bool = False):
    """Feed an utterance frame by frame, yielding events as they occur.

    Video frames are delivered at half the audio rate; the generator's return
    value (``StopIteration.value``) is the finished :class:`StreamState`.
    """
    state = StreamState(model, mode, verify)
    audio = np.asarray(audio)
    av = model.config.modality == "av"
    if av and video is None:
        raise StreamError("audio-visual model requires a video stream")
    video = np.asarray(video) if av else None
    delivered = 0
    for i in range(len(audio)):
        seen = len(state.events)
        if av:
            upto = len(video) if i == len(audio) - 1 else min(len(video), i // 2 + 1)
            state.ingest(audio[i], video[delivered:upto])
            delivered = max(delivered, upto)
        else:
            state.ingest(audio[i])
        state.try_decode()
        yield from state.events[seen:]
    seen = len(state.events)
    state.finalize()
    yield from state.events[seen:]
    return state


def stream_utterance(model: TarisModel, audio, video=None, mode: str = "final", verify: bool = False):
    """Run a whole utterance through a fresh :class:`StreamState`; returns the state."""
    gen = iter_stream(model, audio, video, mode, verify)
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value
