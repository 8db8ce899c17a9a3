"""bAbI ingestion, planted synthetic tasks, and the binary dataset cache."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .errors import BabiParseError, DatasetFormatError, EncodingError, InvalidInputError
from .model import Dimensions, ModelWeights

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MNDS"
DATASET_VERSION = 1
_PUNCT = ".?!,;:"


@dataclass(frozen=True)
class QASample:
    story: tuple
    question: tuple
    answer: int
    supporting_fact_ids: Optional[tuple] = None

    def __post_init__(self):
        story = tuple(tuple(int(i) for i in s) for s in self.story)
        if not story:
            raise InvalidInputError("a sample needs at least one story sentence")
        object.__setattr__(self, "story", story)
        object.__setattr__(self, "question", tuple(int(i) for i in self.question))
        if self.supporting_fact_ids is not None:
            object.__setattr__(self, "supporting_fact_ids", tuple(int(i) for i in self.supporting_fact_ids))
        if self.answer < 0:
            raise InvalidInputError(f"answer label must be non-negative, got {self.answer}")

    def as_triple(self):
        return self.story, self.question, self.answer


@dataclass(frozen=True)
class RawSample:
    """A parsed but not yet encoded sample: sentences as token lists."""

    story: tuple
    question: tuple
    answer: str
    supporting_fact_ids: Optional[tuple] = None


@dataclass
class Vocabulary:
    tokens: list = field(default_factory=list)
    answers: list = field(default_factory=list)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        self.answers = list(self.answers)
        self.token_to_index = {t: i for i, t in enumerate(self.tokens)}
        self.answer_to_label = {a: i for i, a in enumerate(self.answers)}
        if len(self.token_to_index) != len(self.tokens):
            raise InvalidInputError("vocabulary tokens must be unique")
        if len(self.answer_to_label) != len(self.answers):
            raise InvalidInputError("answer tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    @property
    def num_answers(self) -> int:
        return len(self.answers)

    def encode(self, tokens: Iterable[str]) -> tuple:
        try:
            return tuple(self.token_to_index[t] for t in tokens)
        except KeyError as exc:
            raise EncodingError(exc.args[0]) from None

    def decode(self, indices: Iterable[int]) -> list:
        return [self.tokens[i] for i in indices]

    def label(self, answer: str) -> int:
        try:
            return self.answer_to_label[answer]
        except KeyError:
            raise EncodingError(answer) from None


@dataclass
class Dataset:
    samples: list
    vocab: Vocabulary
    skipped: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def triples(self, indices=None):
        idx = range(len(self.samples)) if indices is None else indices
        return [self.samples[i].as_triple() for i in idx]

    @property
    def max_story_length(self) -> int:
        return max((len(s.story) for s in self.samples), default=0)

    def total_word_occurrences(self, indices=None) -> int:
        idx = range(len(self.samples)) if indices is None else indices
        return sum(sum(len(s) for s in self.samples[i].story) + len(self.samples[i].question) for i in idx)

    def equals(self, other: "Dataset") -> bool:
        return (self.samples == other.samples and self.vocab.tokens == other.vocab.tokens
                and self.vocab.answers == other.vocab.answers)

    # -- binary cache --------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        u32 = struct.Struct("<I")
        out.write(DATASET_MAGIC)
        out.write(struct.pack("<IIII", DATASET_VERSION, len(self.samples), len(self.vocab), self.vocab.num_answers))
        for word in self.vocab.tokens + self.vocab.answers:
            raw = word.encode("utf-8")
            out.write(u32.pack(len(raw)))
            out.write(raw)

        def seq(values):
            out.write(u32.pack(len(values)))
            out.write(struct.pack(f"<{len(values)}I", *values))

        for s in self.samples:
            out.write(u32.pack(s.answer))
            seq(s.question)
            out.write(u32.pack(len(s.story)))
            for sent in s.story:
                seq(sent)
            sup = s.supporting_fact_ids
            out.write(u32.pack(0 if sup is None else 1))
            if sup is not None:
                seq(sup)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise DatasetFormatError(f"dataset cache truncated at byte {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        def u32():
            return struct.unpack("<I", take(4))[0]

        def seq():
            n = u32()
            return struct.unpack(f"<{n}I", take(4 * n))

        if bytes(take(4)) != DATASET_MAGIC:
            raise DatasetFormatError("bad dataset magic")
        version = u32()
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        n_samples, n_tokens, n_answers = u32(), u32(), u32()
        words = [bytes(take(u32())).decode("utf-8") for _ in range(n_tokens + n_answers)]
        vocab = Vocabulary(words[:n_tokens], words[n_tokens:])
        samples = []
        for _ in range(n_samples):
            answer = u32()
            question = seq()
            story = tuple(seq() for _ in range(u32()))
            sup = seq() if u32() else None
            if answer >= n_answers:
                raise DatasetFormatError(f"answer label {answer} out of range")
            samples.append(QASample(story, question, answer, sup))
        if pos != len(view):
            raise DatasetFormatError(f"{len(view) - pos} trailing bytes in dataset cache")
        return cls(samples, vocab)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


# -- bAbI ------------------------------------------------------------------------


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace, drop trailing punctuation."""
    out = []
    for word in text.lower().split():
        word = word.strip(_PUNCT)
        if word:
            out.append(word)
    return out


def parse_babi_raw(stream: Union[TextIO, Iterable[str]]) -> tuple[list, int]:
    """Parse bAbI text into :class:`RawSample` objects.

    Returns the samples and the number of questions skipped because their
    answer has more than one word.
    """
    samples, skipped = [], 0
    story: dict = {}
    prev_id = 0
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        head, sep, rest = line.partition(" ")
        if not sep or not head.isdigit():
            raise BabiParseError("expected '<id> <text>'", lineno)
        line_id = int(head)
        if line_id == 1 or line_id <= prev_id:
            story = {}
        prev_id = line_id
        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) not in (2, 3) or not parts[1].strip():
                raise BabiParseError("question line needs 'question<TAB>answer[<TAB>supporting ids]'", lineno)
            question = tokenize(parts[0])
            if not question:
                raise BabiParseError("empty question", lineno)
            if not story:
                raise BabiParseError("question without preceding story sentences", lineno)
            try:
                support = tuple(int(x) for x in parts[2].split()) if len(parts) == 3 else None
            except ValueError:
                raise BabiParseError(f"bad supporting fact ids {parts[2]!r}", lineno) from None
            answer = tokenize(parts[1].replace(",", " "))
            if len(answer) != 1:
                skipped += 1
                continue
            samples.append(RawSample(tuple(story.values()), tuple(question), answer[0], support))
        else:
            sentence = tokenize(rest)
            if not sentence:
                raise BabiParseError("empty statement", lineno)
            story[line_id] = tuple(sentence)
    if skipped:
        log.warning("skipped %d questions with multi-word answers", skipped)
    return samples, skipped


def build_vocabulary(samples: Sequence[RawSample]) -> Vocabulary:
    words, answers = set(), set()
    for s in samples:
        for sent in s.story:
            words.update(sent)
        words.update(s.question)
        answers.add(s.answer)
    return Vocabulary(sorted(words), sorted(answers))


def encode_sample(sample: RawSample, vocab: Vocabulary) -> QASample:
    return QASample(
        tuple(vocab.encode(s) for s in sample.story),
        vocab.encode(sample.question),
        vocab.label(sample.answer),
        sample.supporting_fact_ids,
    )


def parse_babi(stream: Union[TextIO, Iterable[str], str]) -> Dataset:
    """Parse a bAbI task file (or its text) into an encoded dataset."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    raw, skipped = parse_babi_raw(stream)
    vocab = build_vocabulary(raw)
    return Dataset([encode_sample(s, vocab) for s in raw], vocab, skipped)


def load_babi(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        return parse_babi(f)


# -- planted task ----------------------------------------------------------------


@dataclass(frozen=True)
class PlantedConfig:
    """Knobs of the analytic construction; defaults are what the tests pin."""

    address_scale: float = 10.0
    gain: float = 5.0
    hub_classes: int = 1
    hub_coupling: float = 0.3
    # None: pick the largest salience keeping a 10% hub margin
    salience_max: Optional[float] = None
    jitter: float = 0.01

    def salience_limit(self, n_locations: int) -> float:
        if self.salience_max is not None:
            return self.salience_max
        if self.hub_classes == 0 or n_locations < 2:
            return 0.4
        return max(0.0, (0.9 / self.hub_coupling - 1.0) / (n_locations - 1))


def planted_vocabulary(n_entities: int, n_locations: int) -> Vocabulary:
    tokens = [f"e{j}" for j in range(n_entities)] + [f"loc{j}" for j in range(n_locations)] + ["at", "where"]
    return Vocabulary(tokens, [f"loc{j}" for j in range(n_locations)])


def synthesize_planted(n_entities: int, n_locations: int, facts_per_story: int, n_samples: int,
                       seed: int = 0, memory_slots: Optional[int] = None,
                       config: PlantedConfig = PlantedConfig()) -> tuple[Dataset, ModelWeights]:
    """Generate a "where is entity e?" task together with weights that solve it.

    Each story holds ``facts_per_story`` facts "e at loc" about distinct
    entities; the question asks for one of them. The weights are written
    down, not trained:

    * address and question embeddings map each entity to its own unit
      direction (address side scaled up so attention locks onto the fact
      about the asked entity),
    * the context embedding maps each location to a unit direction and adds
      an entity-specific salience to every location coordinate,
    * the controller weight is zero, so one hop suffices,
    * output row ``l`` reads location ``l``; the first ``hub_classes`` rows
      also pick up a fraction of every other location, which makes those
      classes harder to separate from their competitors.

    A small seeded jitter on every weight keeps logits continuous.
    """
    L = facts_per_story if memory_slots is None else memory_slots
    c = config
    if min(n_entities, n_locations, facts_per_story, n_samples) < 1:
        raise InvalidInputError("all planted-task sizes must be >= 1")
    if n_locations < 2:
        raise InvalidInputError("need at least two locations")
    if facts_per_story > n_entities:
        raise InvalidInputError(f"facts_per_story={facts_per_story} exceeds n_entities={n_entities}")
    if facts_per_story > L:
        raise InvalidInputError(f"facts_per_story={facts_per_story} exceeds memory_slots={L}")
    if not 0 <= c.hub_classes < n_locations:
        raise InvalidInputError("hub_classes must leave at least one ordinary class")
    salience_max = c.salience_limit(n_locations)
    # a hub row collects coupling * (1 + (I-1) * salience) when another class is true
    if c.hub_classes and c.hub_coupling * (1 + (n_locations - 1) * salience_max) >= 1.0:
        raise InvalidInputError("hub_coupling too large: hub logits could beat the true class")

    rng = np.random.default_rng(seed)
    vocab = planted_vocabulary(n_entities, n_locations)
    V = len(vocab)
    E = n_entities + n_locations
    I = n_locations
    ent = lambda j: j  # noqa: E731
    loc = lambda j: n_entities + j  # noqa: E731

    W_a = np.zeros((E, V))
    W_c = np.zeros((E, V))
    W_q = np.zeros((E, V))
    W_o = np.zeros((I, E))
    saliences = np.linspace(0.0, salience_max, n_entities) if n_entities > 1 else np.zeros(1)
    for j in range(n_entities):
        W_a[ent(j), vocab.token_to_index[f"e{j}"]] = c.address_scale
        W_q[ent(j), vocab.token_to_index[f"e{j}"]] = 1.0
        W_c[n_entities:, vocab.token_to_index[f"e{j}"]] = saliences[j]
    for j in range(n_locations):
        W_c[loc(j), vocab.token_to_index[f"loc{j}"]] = 1.0
        W_o[j, loc(j)] = c.gain
        if j < c.hub_classes:
            for other in range(n_locations):
                if other != j:
                    W_o[j, loc(other)] = c.gain * c.hub_coupling
    if c.jitter > 0:
        W_a, W_c, W_q, W_o = (w + rng.normal(0.0, c.jitter, w.shape) for w in (W_a, W_c, W_q, W_o))

    dims = Dimensions(vocab_size=V, embed_dim=E, output_dim=I, memory_slots=L, hops=1)
    model = ModelWeights(dims, W_a, W_c, W_q, np.zeros((E, E)), W_o)

    at, where = vocab.token_to_index["at"], vocab.token_to_index["where"]
    samples = []
    for _ in range(n_samples):
        entities = rng.choice(n_entities, size=facts_per_story, replace=False)
        locations = rng.integers(0, n_locations, size=facts_per_story)
        story = tuple(
            (vocab.token_to_index[f"e{e}"], at, vocab.token_to_index[f"loc{l}"])
            for e, l in zip(entities, locations)
        )
        pick = int(rng.integers(0, facts_per_story))
        question = (where, vocab.token_to_index[f"e{entities[pick]}"])
        samples.append(QASample(story, question, int(locations[pick]), (pick + 1,)))
    return Dataset(samples, vocab), model


def train_test_split(n: int, seed: int, test_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the last ``test_fraction`` becomes the test split."""
    if n < 2:
        raise InvalidInputError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = min(max(1, int(round(n * test_fraction))), n - 1)
    return np.sort(perm[:-n_test]), np.sort(perm[-n_test:])
