"""Iteration states shared by :mod:`monoprox.algorithms` and :mod:`monoprox.theory`."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Algorithm",
    "CallCounter",
    "SppmState",
    "SppmOcState",
    "LsvrpState",
    "PointSagaState",
]


class Algorithm(str, enum.Enum):
    SPPM = "sppm"
    SPPM_OC = "sppm-oc"
    LSVRP = "l-svrp"
    POINT_SAGA = "point-saga"

    @classmethod
    def parse(cls, name) -> "Algorithm":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"lsvrp": "l-svrp", "sppmoc": "sppm-oc", "pointsaga": "point-saga", "saga": "point-saga"}
        key = aliases.get(key.replace("-", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown algorithm {name!r}") from None


@dataclass(frozen=True)
class CallCounter:
    """Operator-call accounting.

    ``member_calls`` counts evaluations of a single ``A_i`` or its resolvent;
    ``full_calls`` counts evaluations of the mean operator, each worth ``n``.
    """

    member_calls: int = 0
    full_calls: int = 0

    def charge(self, member: int = 0, full: int = 0) -> "CallCounter":
        return CallCounter(self.member_calls + member, self.full_calls + full)

    def cost(self, n: int) -> int:
        return self.member_calls + n * self.full_calls


@dataclass(frozen=True)
class SppmState:
    x: np.ndarray
    k: int = 0
    calls: CallCounter = field(default_factory=CallCounter)


@dataclass(frozen=True)
class SppmOcState:
    x: np.ndarray
    k: int = 0
    calls: CallCounter = field(default_factory=CallCounter)


@dataclass(frozen=True)
class LsvrpState:
    """``w`` is the anchor point and ``a_bar`` the stored element of ``A(w)``."""

    x: np.ndarray
    w: np.ndarray
    a_bar: np.ndarray
    k: int = 0
    calls: CallCounter = field(default_factory=CallCounter)


@dataclass(frozen=True)
class PointSagaState:
    """Point-SAGA memory.

    ``table[i]`` is the stored element of ``A_i`` and ``a_bar`` its running
    mean. ``shadow_w[i]`` is the point at which ``table[i]`` was taken; the
    algorithm never needs it, it is kept only for Lyapunov values and checks.
    """

    x: np.ndarray
    table: np.ndarray
    a_bar: np.ndarray
    shadow_w: Optional[np.ndarray] = None
    k: int = 0
    calls: CallCounter = field(default_factory=CallCounter)
