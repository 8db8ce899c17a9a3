"""Model parameters and the exact reference forward pass.

Everything here runs in float64 and is written for clarity rather than
speed: it is the yardstick the streaming engine and the early-exit search
are checked against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .counters import OpCounters
from .errors import (
    CapacityError,
    ContractError,
    EmptyMemoryError,
    InvalidInputError,
    ModelFormatError,
)

Sentence = Sequence[int]

MODEL_MAGIC = b"MANN"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIB")


@dataclass(frozen=True)
class Dimensions:
    vocab_size: int
    embed_dim: int
    output_dim: int
    memory_slots: int
    hops: int = 3

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "output_dim", "memory_slots", "hops"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")


def _frozen(a, shape, name):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.shape != shape:
        raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Trained parameters of a single-layer-memory MANN.

    ``W_emb_a`` / ``W_emb_c`` embed story sentences into address and context
    memory, ``W_emb_q`` embeds the question, ``W_r`` is the controller weight
    and ``W_o`` the output layer. With ``shared_embeddings`` the context
    embedding is the very same array as the address embedding.
    """

    dims: Dimensions
    W_emb_a: np.ndarray
    W_emb_c: Optional[np.ndarray]
    W_emb_q: np.ndarray
    W_r: np.ndarray
    W_o: np.ndarray
    shared_embeddings: bool = False

    def __post_init__(self):
        d = self.dims
        E, V, I = d.embed_dim, d.vocab_size, d.output_dim
        set_ = object.__setattr__
        set_(self, "W_emb_a", _frozen(self.W_emb_a, (E, V), "W_emb_a"))
        if self.shared_embeddings:
            set_(self, "W_emb_c", self.W_emb_a)
        else:
            if self.W_emb_c is None:
                raise InvalidInputError("W_emb_c is required unless shared_embeddings is set")
            set_(self, "W_emb_c", _frozen(self.W_emb_c, (E, V), "W_emb_c"))
        set_(self, "W_emb_q", _frozen(self.W_emb_q, (E, V), "W_emb_q"))
        set_(self, "W_r", _frozen(self.W_r, (E, E), "W_r"))
        set_(self, "W_o", _frozen(self.W_o, (I, E), "W_o"))

    @classmethod
    def zeros(cls, dims: Dimensions, shared_embeddings=False) -> "ModelWeights":
        E, V, I = dims.embed_dim, dims.vocab_size, dims.output_dim
        return cls(
            dims,
            np.zeros((E, V)),
            None if shared_embeddings else np.zeros((E, V)),
            np.zeros((E, V)),
            np.zeros((E, E)),
            np.zeros((I, E)),
            shared_embeddings=shared_embeddings,
        )

    @classmethod
    def random(cls, dims: Dimensions, rng, scale=0.1, shared_embeddings=False):
        """Elementwise uniform in [-scale, scale]."""
        E, V, I = dims.embed_dim, dims.vocab_size, dims.output_dim

        def u(*shape):
            return rng.uniform(-scale, scale, size=shape)

        return cls(
            dims,
            u(E, V),
            None if shared_embeddings else u(E, V),
            u(E, V),
            u(E, E),
            u(I, E),
            shared_embeddings=shared_embeddings,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W_emb_a": self.W_emb_a}
        if not self.shared_embeddings:
            out["W_emb_c"] = self.W_emb_c
        out.update(W_emb_q=self.W_emb_q, W_r=self.W_r, W_o=self.W_o)
        return out

    def replace(self, **arrays) -> "ModelWeights":
        current = dict(self.arrays())
        current.setdefault("W_emb_c", None)
        current.update(arrays)
        return ModelWeights(self.dims, shared_embeddings=self.shared_embeddings, **current)

    def equals(self, other: "ModelWeights") -> bool:
        if self.dims != other.dims or self.shared_embeddings != other.shared_embeddings:
            return False
        a, b = self.arrays(), other.arrays()
        return all(np.array_equal(a[k], b[k]) for k in a)

    # -- file format -------------------------------------------------------

    def to_bytes(self) -> bytes:
        d = self.dims
        header = _HEADER.pack(
            MODEL_MAGIC, MODEL_VERSION, d.vocab_size, d.embed_dim, d.output_dim,
            d.memory_slots, d.hops, int(self.shared_embeddings),
        )
        payload = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays().values()
        )
        return header + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if len(data) < _HEADER.size:
            raise ModelFormatError(f"model file truncated: {len(data)} bytes, header needs {_HEADER.size}")
        magic, version, V, E, I, L, T, shared = _HEADER.unpack_from(data)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")
        if shared not in (0, 1):
            raise ModelFormatError(f"bad shared_embeddings flag {shared}")
        try:
            dims = Dimensions(V, E, I, L, T)
        except InvalidInputError as exc:
            raise ModelFormatError(str(exc)) from exc
        shapes = [("W_emb_a", (E, V))]
        if not shared:
            shapes.append(("W_emb_c", (E, V)))
        shapes += [("W_emb_q", (E, V)), ("W_r", (E, E)), ("W_o", (I, E))]
        expected = _HEADER.size + 8 * sum(r * c for _, (r, c) in shapes)
        if len(data) != expected:
            raise ModelFormatError(f"model file has {len(data)} bytes, expected {expected}")
        arrays, offset = {}, _HEADER.size
        for name, (r, c) in shapes:
            n = r * c
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(r, c)
            offset += 8 * n
        arrays.setdefault("W_emb_c", None)
        try:
            return cls(dims, shared_embeddings=bool(shared), **arrays)
        except InvalidInputError as exc:
            raise ModelFormatError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class MemoryState:
    """Address and context memory banks with ``used_slots`` rows filled."""

    M_a: np.ndarray
    M_c: np.ndarray
    used_slots: int = 0

    @classmethod
    def empty(cls, slots: int, embed_dim: int) -> "MemoryState":
        return cls(np.zeros((slots, embed_dim)), np.zeros((slots, embed_dim)), 0)

    @property
    def capacity(self) -> int:
        return self.M_a.shape[0]

    def write(self, row_a, row_c) -> None:
        if self.used_slots >= self.capacity:
            raise CapacityError(f"memory full: all {self.capacity} slots in use")
        self.M_a[self.used_slots] = row_a
        self.M_c[self.used_slots] = row_c
        self.used_slots += 1

    def clear(self) -> None:
        self.M_a[:] = 0.0
        self.M_c[:] = 0.0
        self.used_slots = 0

    def snapshot(self) -> "MemoryState":
        n = self.used_slots
        return MemoryState(self.M_a[:n].copy(), self.M_c[:n].copy(), n)


def check_sentence(s: Sentence, vocab_size: int) -> None:
    if len(s) == 0:
        raise InvalidInputError("sentence is empty")
    for idx in s:
        if not 0 <= idx < vocab_size:
            raise InvalidInputError(f"word index {idx} out of range for vocabulary of size {vocab_size}")


def embed_sentence(W, s: Sentence, counters: Optional[OpCounters] = None) -> np.ndarray:
    """Sum the columns of ``W`` selected by the word indices of ``s``.

    Repeated indices are summed repeatedly. Only ``len(s)`` columns are read
    and no multiplication happens, which is the whole point of feeding word
    indices instead of a dense bag-of-words vector.
    """
    check_sentence(s, W.shape[1])
    out = np.zeros(W.shape[0])
    for idx in s:
        out += W[:, idx]
    if counters is not None:
        counters.weight_column_reads += len(s)
    return out


def bag_of_words(s: Sentence, vocab_size: int) -> np.ndarray:
    bow = np.zeros(vocab_size)
    for idx in s:
        bow[idx] += 1.0
    return bow


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x))
    return e / e.sum()


def address(M_a, k, used_slots: int) -> np.ndarray:
    """Content-based attention over the first ``used_slots`` memory rows."""
    if used_slots < 1:
        raise EmptyMemoryError("cannot address an empty memory")
    k = np.asarray(k, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise InvalidInputError("read key is not finite")
    return softmax(M_a[:used_slots] @ k)


def read_vector(M_c, a, used_slots: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or len(a) != used_slots:
        raise InvalidInputError(f"attention has length {a.shape}, expected {used_slots}")
    return M_c[:used_slots].T @ a


def read_key(t: int, W_emb_q=None, q: Optional[Sentence] = None, h_prev=None) -> np.ndarray:
    """Read key for hop ``t`` (1-based): the embedded question, then the previous controller output."""
    if t < 1:
        raise ContractError(f"hop index must be >= 1, got {t}")
    if t == 1:
        if q is None or W_emb_q is None or h_prev is not None:
            raise ContractError("hop 1 needs the question (and W_emb_q) and no previous output")
        return embed_sentence(W_emb_q, q)
    if h_prev is None or q is not None:
        raise ContractError(f"hop {t} needs the previous controller output and no question")
    return np.asarray(h_prev, dtype=np.float64)


def _check_matvec(W, v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or W.shape[1] != v.shape[0]:
        raise InvalidInputError(f"{name} shape {W.shape} incompatible with vector of shape {v.shape}")
    return v


def controller_step(r, k, W_r) -> np.ndarray:
    k = _check_matvec(W_r, k, "W_r")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (W_r.shape[0],):
        raise InvalidInputError(f"read vector shape {r.shape} does not match W_r {W_r.shape}")
    return r + W_r @ k


def output_logits(h, W_o) -> np.ndarray:
    h = _check_matvec(W_o, h, "W_o")
    return W_o @ h


def exact_argmax(z, counters: Optional[OpCounters] = None) -> int:
    """Linear scan; the smallest index wins ties. Uses ``len(z) - 1`` comparisons."""
    if len(z) == 0:
        raise InvalidInputError("cannot take argmax of an empty logit vector")
    best = 0
    for i in range(1, len(z)):
        if z[i] > z[best]:
            best = i
    if counters is not None:
        counters.logit_comparisons += len(z) - 1
    return best


def write_story(model: ModelWeights, story: Sequence[Sentence]) -> MemoryState:
    L = model.dims.memory_slots
    if len(story) > L:
        raise CapacityError(f"story has {len(story)} sentences but memory holds {L}")
    mem = MemoryState.empty(L, model.dims.embed_dim)
    for s in story:
        mem.write(embed_sentence(model.W_emb_a, s), embed_sentence(model.W_emb_c, s))
    return mem


@dataclass
class ForwardTrace:
    """Intermediate values of one reference forward pass."""

    memory: MemoryState
    keys: list = field(default_factory=list)
    attentions: list = field(default_factory=list)
    reads: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    label: Optional[int] = None

    @property
    def h(self) -> np.ndarray:
        return self.outputs[-1]


def forward(model: ModelWeights, story: Sequence[Sentence], q: Sentence, hops=None) -> ForwardTrace:
    if len(story) == 0:
        raise InvalidInputError("story must contain at least one sentence")
    T = model.dims.hops if hops is None else hops
    check_sentence(q, model.dims.vocab_size)
    mem = write_story(model, story)
    trace = ForwardTrace(mem)
    h = None
    for t in range(1, T + 1):
        k = read_key(t, model.W_emb_q, q) if t == 1 else read_key(t, h_prev=h)
        a = address(mem.M_a, k, mem.used_slots)
        r = read_vector(mem.M_c, a, mem.used_slots)
        h = controller_step(r, k, model.W_r)
        trace.keys.append(k)
        trace.attentions.append(a)
        trace.reads.append(r)
        trace.outputs.append(h)
    trace.logits = output_logits(h, model.W_o)
    trace.label = exact_argmax(trace.logits)
    return trace


def oracle_infer(model: ModelWeights, story: Sequence[Sentence], q: Sentence, hops=None):
    """Exact single-threaded inference. Returns ``(label, logits)``."""
    trace = forward(model, story, q, hops)
    return trace.label, trace.logits
