"""Streaming software model of the accelerator dataflow.

Five stages connected by bounded single-producer/single-consumer FIFOs::

    CONTROL -> INPUT&WRITE -> MEM -> READ -> OUTPUT -> (answers)

Weights are streamed once as ``MODEL_CHUNK`` tokens at the head of every run
and cached by the stages that need them. Story sentences and questions
follow; ``FLUSH`` clears memory between stories.

The hop recurrence lives inside the READ stage: when a question reaches MEM,
MEM ships a read-only snapshot of its banks together with the first read key,
and READ runs every hop against that snapshot. The stage graph is therefore a
chain and cannot deadlock for any queue capacity. Attention and read-vector
arithmetic is tallied under the ``mem`` unit even though READ executes it.

Two schedulers run the same stage handlers: one thread per stage with
blocking queues, or a single-threaded round-robin loop. Results and counters
never depend on which one is used or on the queue capacity.
"""

from __future__ import annotations

import enum
import math
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .counters import OpCounters
from .errors import CapacityError, InvalidInputError, ProtocolError
from .model import MemoryState, ModelWeights, Sentence, check_sentence, embed_sentence

__all__ = [
    "Kind",
    "StreamToken",
    "OpCounters",
    "PipelineConfig",
    "Answer",
    "InferenceResult",
    "Pipeline",
    "MemoryUnit",
    "engine_infer",
    "write_stage",
    "output_stage",
    "reset",
    "story_stream",
]


class Kind(enum.Enum):
    MODEL_CHUNK = "model_chunk"
    STORY_SENTENCE = "story_sentence"
    QUESTION = "question"
    END_OF_INPUT = "end_of_input"
    ANSWER = "answer"
    FLUSH = "flush"
    # stage-to-stage only
    ROW = "row"
    RECALL = "recall"
    HIDDEN = "hidden"
    ERROR = "error"


@dataclass(frozen=True)
class StreamToken:
    kind: Kind
    payload: Any = None


@dataclass(frozen=True)
class PipelineConfig:
    queue_capacity: int = 4
    hops: Optional[int] = None
    thresholding: Any = None  # ThresholdTable or None
    scheduler: str = "threads"

    def __post_init__(self):
        if not isinstance(self.queue_capacity, int) or self.queue_capacity < 1:
            raise InvalidInputError(f"queue_capacity must be >= 1, got {self.queue_capacity!r}")
        if self.hops is not None and self.hops < 1:
            raise InvalidInputError(f"hops must be >= 1, got {self.hops}")
        if self.scheduler not in ("threads", "sequential"):
            raise InvalidInputError(f"unknown scheduler {self.scheduler!r}")


@dataclass(frozen=True)
class Answer:
    query_id: int
    label: int
    dot_products: int
    logits: Optional[np.ndarray] = None  # only when every logit was computed
    h: Optional[np.ndarray] = None


@dataclass
class InferenceResult:
    label: int
    counters: OpCounters
    logits: Optional[np.ndarray]
    dot_products: int
    by_unit: dict = field(default_factory=dict)


def _bump_sentence(counters: OpCounters, s: Sentence) -> None:
    counters.weight_column_reads += len(s)


class MemoryUnit:
    """Content addressing and soft read, evaluated element by element.

    One exponential per slot, one division per slot; mirrors a datapath that
    cannot vectorize the softmax.
    """

    def __init__(self, memory: MemoryState, counters: OpCounters):
        self.memory = memory
        self.counters = counters

    def attend(self, k: np.ndarray) -> list[float]:
        mem, c = self.memory, self.counters
        n = mem.used_slots
        E = mem.M_a.shape[1]
        scores = []
        for i in range(n):
            scores.append(float(mem.M_a[i] @ k))
        c.multiplications += n * E
        peak = max(scores)
        weights = []
        for s in scores:
            weights.append(math.exp(s - peak))
        c.exp_evaluations += n
        total = 0.0
        for w in weights:
            total += w
        attn = []
        for w in weights:
            attn.append(w / total)
        c.divisions += n
        return attn

    def read(self, attn: Sequence[float]) -> np.ndarray:
        mem = self.memory
        r = np.zeros(mem.M_c.shape[1])
        for i, a in enumerate(attn):
            r += a * mem.M_c[i]
        self.counters.multiplications += len(attn) * mem.M_c.shape[1]
        return r


# -- stages --------------------------------------------------------------------


class Stage:
    name = "stage"
    needs: tuple = ()

    def __init__(self):
        self.counters = OpCounters()
        self.weights = {}

    def handle(self, tok: StreamToken) -> list[StreamToken]:
        if tok.kind is Kind.MODEL_CHUNK:
            key, value = tok.payload
            if key in self.needs:
                self.weights[key] = value
            return [tok]
        if tok.kind in (Kind.END_OF_INPUT, Kind.ERROR):
            return [tok]
        missing = [k for k in self.needs if k not in self.weights]
        if missing:
            raise ProtocolError(f"{self.name} received {tok.kind.value} before model chunks {missing}")
        return self.process(tok)

    def process(self, tok: StreamToken) -> list[StreamToken]:
        return [tok]

    def unit_counters(self) -> dict[str, OpCounters]:
        return {self.name: self.counters}


class ControlStage(Stage):
    name = "control"

    def __init__(self):
        super().__init__()
        self.sentences_since_flush = 0
        self.next_query = 0

    def process(self, tok):
        if tok.kind is Kind.FLUSH:
            self.sentences_since_flush = 0
            return [tok]
        if tok.kind is Kind.STORY_SENTENCE:
            self.sentences_since_flush += 1
            return [tok]
        if tok.kind is Kind.QUESTION:
            if self.sentences_since_flush == 0:
                raise ProtocolError("question arrived before any story sentence since the last flush")
            qid = self.next_query
            self.next_query += 1
            return [StreamToken(Kind.QUESTION, (qid, tok.payload))]
        raise ProtocolError(f"unexpected token kind {tok.kind.value} on the input stream")


class InputWriteStage(Stage):
    """Sparse embedding: fetch one stacked (address, context) column per word."""

    name = "input"
    needs = ("W_emb_a", "W_emb_c", "W_emb_q")

    def __init__(self):
        super().__init__()
        self._story_bank = None

    def process(self, tok):
        if tok.kind is Kind.STORY_SENTENCE:
            if self._story_bank is None:
                W_a, W_c = self.weights["W_emb_a"], self.weights["W_emb_c"]
                self._story_bank = W_a if W_c is W_a else np.vstack([W_a, W_c])
            col = embed_sentence(self._story_bank, tok.payload, self.counters)
            E = self.weights["W_emb_a"].shape[0]
            row_a = col[:E]
            row_c = row_a if self._story_bank.shape[0] == E else col[E:]
            return [StreamToken(Kind.ROW, (row_a, row_c))]
        if tok.kind is Kind.QUESTION:
            qid, q = tok.payload
            k = embed_sentence(self.weights["W_emb_q"], q, self.counters)
            return [StreamToken(Kind.QUESTION, (qid, k))]
        return [tok]


class MemStage(Stage):
    name = "mem"
    needs = ("dims",)

    def __init__(self):
        super().__init__()
        self.memory = None

    def process(self, tok):
        if self.memory is None:
            dims = self.weights["dims"]
            self.memory = MemoryState.empty(dims.memory_slots, dims.embed_dim)
        if tok.kind is Kind.ROW:
            row_a, row_c = tok.payload
            write_stage_rows(self.memory, row_a, row_c)
            return []
        if tok.kind is Kind.QUESTION:
            qid, k = tok.payload
            return [StreamToken(Kind.RECALL, (qid, self.memory.snapshot(), k))]
        if tok.kind is Kind.FLUSH:
            reset(self.memory)
            return [tok]
        raise ProtocolError(f"{self.name} cannot handle {tok.kind.value}")


class ReadStage(Stage):
    name = "read"
    needs = ("W_r", "dims")

    def __init__(self, hops: Optional[int]):
        super().__init__()
        self.hops = hops
        self.mem_counters = OpCounters()

    def process(self, tok):
        if tok.kind is Kind.RECALL:
            qid, snapshot, k = tok.payload
            W_r = self.weights["W_r"]
            E = W_r.shape[0]
            T = self.hops or self.weights["dims"].hops
            unit = MemoryUnit(snapshot, self.mem_counters)
            h = None
            for _ in range(T):
                attn = unit.attend(k)
                r = unit.read(attn)
                h = r + W_r @ k
                self.counters.multiplications += E * E
                k = h
            return [StreamToken(Kind.HIDDEN, (qid, h))]
        return [tok]

    def unit_counters(self):
        return {"read": self.counters, "mem": self.mem_counters}


class OutputStage(Stage):
    name = "output"
    needs = ("W_o",)

    def __init__(self, thresholding=None):
        super().__init__()
        self.thresholding = thresholding

    def process(self, tok):
        if tok.kind is Kind.HIDDEN:
            qid, h = tok.payload
            label, used, logits = _output(h, self.weights["W_o"], self.thresholding, self.counters)
            return [StreamToken(Kind.ANSWER, Answer(qid, label, used, logits, h))]
        return [tok]


def write_stage_rows(mem: MemoryState, row_a, row_c) -> None:
    if mem.used_slots >= mem.capacity:
        raise CapacityError(f"memory full: story exceeds {mem.capacity} slots")
    mem.write(row_a, row_c)


def _output(h, W_o, thresholding, counters: OpCounters):
    if thresholding is not None:
        from .thresholding import thresholded_argmax

        label, used = thresholded_argmax(h, W_o, thresholding, counters)
        return label, used, None
    I, E = W_o.shape
    z = np.empty(I)
    for i in range(I):
        z[i] = W_o[i] @ h
    counters.multiplications += I * E
    best = 0
    for i in range(1, I):
        if z[i] > z[best]:
            best = i
    counters.logit_comparisons += I - 1
    return best, I, z


# -- pipeline ------------------------------------------------------------------


def model_chunks(model: ModelWeights) -> list[StreamToken]:
    items = [
        ("dims", model.dims),
        ("W_emb_a", model.W_emb_a),
        ("W_emb_c", model.W_emb_c),
        ("W_emb_q", model.W_emb_q),
        ("W_r", model.W_r),
        ("W_o", model.W_o),
    ]
    return [StreamToken(Kind.MODEL_CHUNK, item) for item in items]


def story_stream(samples: Iterable) -> list[StreamToken]:
    """Tokens for a sequence of ``(story, question)`` pairs, one flush before each story."""
    out = []
    for story, q in samples:
        out.append(StreamToken(Kind.FLUSH))
        out.extend(StreamToken(Kind.STORY_SENTENCE, s) for s in story)
        out.append(StreamToken(Kind.QUESTION, q))
    return out


class _StageFailure(Exception):
    pass


class Pipeline:
    """One run of the five-stage pipeline over a token stream."""

    def __init__(self, model: ModelWeights, cfg: Optional[PipelineConfig] = None):
        self.model = model
        self.cfg = cfg or PipelineConfig()
        self.stages = [
            ControlStage(),
            InputWriteStage(),
            MemStage(),
            ReadStage(self.cfg.hops),
            OutputStage(self.cfg.thresholding),
        ]

    def run(self, tokens: Iterable[StreamToken]) -> list[Answer]:
        tokens = list(tokens)
        for tok in tokens:
            if tok.kind in (Kind.STORY_SENTENCE, Kind.QUESTION):
                check_sentence(tok.payload, self.model.dims.vocab_size)
        stream = model_chunks(self.model) + tokens + [StreamToken(Kind.END_OF_INPUT)]
        if self.cfg.scheduler == "threads":
            sink = self._run_threads(stream)
        else:
            sink = self._run_sequential(stream)
        errors = [t.payload for t in sink if t.kind is Kind.ERROR]
        if errors:
            raise errors[0]
        if not sink or sink[-1].kind is not Kind.END_OF_INPUT:
            raise ProtocolError("pipeline terminated without end-of-input marker")
        answers = [t.payload for t in sink if t.kind is Kind.ANSWER]
        n_questions = sum(1 for t in tokens if t.kind is Kind.QUESTION)
        if len(answers) != n_questions or [a.query_id for a in answers] != list(range(n_questions)):
            raise ProtocolError(f"{n_questions} questions produced {len(answers)} answers")
        return answers

    def _run_sequential(self, stream):
        cap = self.cfg.queue_capacity
        n = len(self.stages)
        inboxes = [deque() for _ in range(n)]
        sink = []
        pending: list[deque] = [deque() for _ in range(n)]
        source = deque(stream)
        while True:
            progress = False
            if source and len(inboxes[0]) < cap:
                inboxes[0].append(source.popleft())
                progress = True
            for i, stage in enumerate(self.stages):
                last = i == n - 1
                while pending[i] and (last or len(inboxes[i + 1]) < cap):
                    tok = pending[i].popleft()
                    (sink if last else inboxes[i + 1]).append(tok)
                    progress = True
                if not pending[i] and inboxes[i]:
                    pending[i].extend(stage.handle(inboxes[i].popleft()))
                    progress = True
            if not progress:
                return sink

    def _run_threads(self, stream):
        cap = self.cfg.queue_capacity
        n = len(self.stages)
        links = [queue.Queue(maxsize=cap) for _ in range(n)] + [queue.Queue()]

        def worker(stage, inbox, outbox):
            failed = False
            while True:
                tok = inbox.get()
                if tok.kind is Kind.END_OF_INPUT:
                    outbox.put(tok)
                    return
                if failed:
                    continue
                try:
                    for out in stage.handle(tok):
                        outbox.put(out)
                except Exception as exc:  # surfaced by run()
                    failed = True
                    outbox.put(StreamToken(Kind.ERROR, exc))

        threads = [
            threading.Thread(target=worker, args=(s, links[i], links[i + 1]), daemon=True)
            for i, s in enumerate(self.stages)
        ]
        for t in threads:
            t.start()
        for tok in stream:
            links[0].put(tok)
        for t in threads:
            t.join()
        sink = []
        while not links[-1].empty():
            sink.append(links[-1].get_nowait())
        return sink

    def counters_by_unit(self) -> dict[str, OpCounters]:
        units = {}
        for stage in self.stages:
            for name, c in stage.unit_counters().items():
                units[name] = c.copy()
        return units

    def counters(self) -> OpCounters:
        return OpCounters.total(self.counters_by_unit().values())


def engine_infer(model: ModelWeights, story: Sequence[Sentence], q: Sentence,
                 cfg: Optional[PipelineConfig] = None) -> InferenceResult:
    """Answer one question through the streaming pipeline."""
    if len(story) > model.dims.memory_slots:
        raise CapacityError(f"story has {len(story)} sentences but memory holds {model.dims.memory_slots}")
    pipe = Pipeline(model, cfg)
    (ans,) = pipe.run(story_stream([(story, q)]))
    return InferenceResult(ans.label, pipe.counters(), ans.logits, ans.dot_products, pipe.counters_by_unit())


def write_stage(s: Sentence, mem: MemoryState, model: ModelWeights,
                counters: Optional[OpCounters] = None) -> MemoryState:
    """Embed ``s`` into the next free address/context row of ``mem``."""
    if mem.used_slots >= mem.capacity:
        raise CapacityError(f"memory full: all {mem.capacity} slots in use")
    row_a = embed_sentence(model.W_emb_a, s, counters)
    row_c = row_a if model.shared_embeddings else embed_sentence(model.W_emb_c, s)
    mem.write(row_a, row_c)
    return mem


def output_stage(h, model: ModelWeights, thresholding=None, counters: Optional[OpCounters] = None):
    """Sequential output layer. Returns ``(label, dot_products_used)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.dims.embed_dim,):
        raise InvalidInputError(f"h has shape {h.shape}, expected ({model.dims.embed_dim},)")
    label, used, _ = _output(h, model.W_o, thresholding, counters if counters is not None else OpCounters())
    return label, used


def reset(mem: MemoryState) -> MemoryState:
    mem.clear()
    return mem
