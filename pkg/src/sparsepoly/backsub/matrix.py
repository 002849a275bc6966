from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class Polarity(enum.Enum):
    LOWER = "lower"
    UPPER = "upper"

    @property
    def upper(self) -> bool:
        return self is Polarity.UPPER


@dataclass
class BoundMatrix:
    """In-flight polyhedral bounds of a set of query neurons.

    Row ``r`` encodes ``x[row_index[r]] (<= or >=) sum coef[r] * x_frame + const[r]``
    where the frame of row ``r`` is the window of ``layer`` starting at
    ``origins[r]`` with the shared ``width`` and all channels.  ``coef`` and
    ``const`` are interval arrays ``(lo, hi)``.
    """
    query_layer: int
    layer: int
    polarity: Polarity
    coef: tuple
    const: tuple
    origins: np.ndarray
    row_index: np.ndarray

    @property
    def rows(self) -> int:
        return self.row_index.shape[0]

    @property
    def width(self) -> tuple[int, int]:
        return self.coef[0].shape[1], self.coef[0].shape[2]

    @property
    def channels(self) -> int:
        return self.coef[0].shape[3]

    def flat_coef(self) -> tuple:
        lo, hi = self.coef
        R = lo.shape[0]
        flo = lo.reshape(R, -1)
        return (flo, flo) if hi is lo else (flo, hi.reshape(R, -1))

    def with_(self, **kw) -> "BoundMatrix":
        return replace(self, **kw)


@dataclass
class PassStats:
    rows_processed: int = 0
    rows_terminated: int = 0
    steps: int = 0
    ops: dict = field(default_factory=dict)

    def count(self, kind: str, n: int) -> None:
        self.ops[kind] = self.ops.get(kind, 0) + int(n)

    def merge(self, other: "PassStats") -> None:
        self.rows_processed += other.rows_processed
        self.rows_terminated += other.rows_terminated
        self.steps += other.steps
        for k, v in other.ops.items():
            self.count(k, v)
