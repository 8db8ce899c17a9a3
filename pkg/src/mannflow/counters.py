"""Deterministic operation tallies used as the energy proxy."""

from dataclasses import asdict, dataclass, fields


@dataclass
class OpCounters:
    """Monotone tallies of the work done by an inference path.

    Counts are exact integers, so two runs that did the same work compare
    equal regardless of how the work was scheduled.
    """

    multiplications: int = 0
    weight_column_reads: int = 0
    logit_comparisons: int = 0
    exp_evaluations: int = 0
    divisions: int = 0

    def add(self, other: "OpCounters") -> "OpCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**asdict(self)).add(other)

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def copy(self) -> "OpCounters":
        return OpCounters(**asdict(self))

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def total(cls, parts) -> "OpCounters":
        out = cls()
        for p in parts:
            out.add(p)
        return out
