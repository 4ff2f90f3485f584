"""Discrete mixing measures and exact Wasserstein distances between them.

A mixing measure is a finite weighted set of atoms ``(theta1, theta2)``.
Distances are computed by solving the transportation linear program exactly
(HiGHS dual simplex through :func:`scipy.optimize.linprog`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

WEIGHT_SUM_TOL = 1e-9
ZERO_WEIGHT_TOL = 1e-12


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    theta1: np.ndarray
    theta2: np.ndarray
    weight: float

    @property
    def location(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2])


@dataclass(frozen=True)
class Box:
    """Compact parameter box ``Theta1 x Theta2``."""

    theta1_lo: np.ndarray
    theta1_hi: np.ndarray
    theta2_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta2_hi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("theta1_lo", "theta1_hi", "theta2_lo", "theta2_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.theta1_lo.shape != self.theta1_hi.shape or self.theta2_lo.shape != self.theta2_hi.shape:
            raise MeasureError("box bounds have inconsistent shapes")
        if np.any(self.theta1_lo > self.theta1_hi) or np.any(self.theta2_lo > self.theta2_hi):
            raise MeasureError("box lower bound exceeds upper bound")

    @property
    def lo(self) -> np.ndarray:
        return np.concatenate([self.theta1_lo, self.theta2_lo])

    @property
    def hi(self) -> np.ndarray:
        return np.concatenate([self.theta1_hi, self.theta2_hi])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> bool:
        points = np.atleast_2d(points)
        return bool(np.all(points >= self.lo - tol) and np.all(points <= self.hi + tol))

    def to_dict(self) -> dict:
        return {
            "theta1_lo": self.theta1_lo.tolist(),
            "theta1_hi": self.theta1_hi.tolist(),
            "theta2_lo": self.theta2_lo.tolist(),
            "theta2_hi": self.theta2_hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(
            np.asarray(d["theta1_lo"], float),
            np.asarray(d["theta1_hi"], float),
            np.asarray(d.get("theta2_lo", []), float),
            np.asarray(d.get("theta2_hi", []), float),
        )


class MixingMeasure:
    """Finite mixing measure ``sum_j p_j delta_{(theta1_j, theta2_j)}``.

    Stored column-wise: ``weights`` has shape ``(k,)``, ``theta1`` shape
    ``(k, d1)`` and ``theta2`` shape ``(k, d2)`` (``d2`` may be 0).
    Instances are treated as immutable; the arrays are made read-only.
    """

    def __init__(
        self,
        weights: Sequence[float],
        theta1,
        theta2=None,
        box: Optional[Box] = None,
        normalized: bool = True,
    ):
        w = np.asarray(weights, dtype=float).ravel()
        k = w.size
        if k == 0:
            raise MeasureError("a mixing measure needs at least one atom")
        t1 = np.asarray(theta1, dtype=float)
        if t1.ndim <= 1:
            t1 = t1.reshape(k, -1)
        if theta2 is None:
            t2 = np.zeros((k, 0))
        else:
            t2 = np.asarray(theta2, dtype=float)
            if t2.ndim <= 1:
                t2 = t2.reshape(k, -1)
        if t1.shape[0] != k or t2.shape[0] != k:
            raise MeasureError("atom arrays and weights disagree on the number of atoms")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        if normalized and abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError(f"weights sum to {w.sum():.12g}, expected 1")
        if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
            raise MeasureError("atom parameters must be finite")
        for arr in (w, t1, t2):
            arr.setflags(write=False)
        self.weights = w
        self.theta1 = t1
        self.theta2 = t2
        self.box = box

    @classmethod
    def from_atoms(cls, atoms: Iterable[Atom], box: Optional[Box] = None) -> "MixingMeasure":
        atoms = list(atoms)
        return cls(
            [a.weight for a in atoms],
            np.array([np.atleast_1d(a.theta1) for a in atoms], dtype=float),
            np.array([np.atleast_1d(a.theta2) for a in atoms], dtype=float).reshape(len(atoms), -1),
            box=box,
        )

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def d1(self) -> int:
        return self.theta1.shape[1]

    @property
    def d2(self) -> int:
        return self.theta2.shape[1]

    @property
    def locations(self) -> np.ndarray:
        """Concatenated ``(theta1, theta2)`` per atom, shape ``(k, d1 + d2)``."""
        return np.hstack([self.theta1, self.theta2])

    @property
    def atoms(self) -> list[Atom]:
        return [Atom(self.theta1[j].copy(), self.theta2[j].copy(), float(self.weights[j])) for j in range(self.k)]

    def pruned(self, tol: float = ZERO_WEIGHT_TOL) -> "MixingMeasure":
        keep = self.weights > tol
        w = self.weights[keep]
        return MixingMeasure(w / w.sum(), self.theta1[keep], self.theta2[keep], box=self.box)

    def permuted(self, order: Sequence[int]) -> "MixingMeasure":
        order = np.asarray(order)
        return MixingMeasure(self.weights[order], self.theta1[order], self.theta2[order], box=self.box)

    def with_box(self, box: Optional[Box]) -> "MixingMeasure":
        return MixingMeasure(self.weights, self.theta1, self.theta2, box=box)

    def __repr__(self) -> str:
        parts = ", ".join(
            f"{w:.4g}*d{tuple(np.round(loc, 4))}" for w, loc in zip(self.weights, self.locations)
        )
        return f"MixingMeasure({parts})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, MixingMeasure):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.theta1, other.theta1)
            and np.array_equal(self.theta2, other.theta2)
        )

    __hash__ = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "atoms": [
                {"theta1": self.theta1[j].tolist(), "theta2": self.theta2[j].tolist(), "weight": float(self.weights[j])}
                for j in range(self.k)
            ]
        }
        if self.box is not None:
            d["box"] = self.box.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MixingMeasure":
        atoms = d.get("atoms")
        if not atoms:
            raise MeasureError("measure JSON must contain a nonempty 'atoms' list")
        w = [float(a["weight"]) for a in atoms]
        t1 = [list(map(float, np.atleast_1d(a["theta1"]))) for a in atoms]
        t2 = [list(map(float, np.atleast_1d(a.get("theta2", [])))) for a in atoms]
        if len({len(t) for t in t1}) != 1 or len({len(t) for t in t2}) != 1:
            raise MeasureError("atoms have inconsistent dimensions")
        box = Box.from_dict(d["box"]) if d.get("box") else None
        return cls(w, np.array(t1), np.array(t2).reshape(len(atoms), -1), box=box)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MixingMeasure":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TransportPlan:
    q: np.ndarray
    cost: float


def _check_compatible(G: MixingMeasure, H: MixingMeasure) -> None:
    if G.d1 != H.d1 or G.d2 != H.d2:
        raise MeasureError(f"atom dimensions differ: ({G.d1},{G.d2}) vs ({H.d1},{H.d2})")


def cost_matrix(G: MixingMeasure, H: MixingMeasure, r: int = 1) -> np.ndarray:
    """Matrix of ``||atom_i(G) - atom_j(H)||^r`` (Euclidean on concatenated parameters)."""
    if r not in (1, 2):
        raise MeasureError("order r must be 1 or 2")
    _check_compatible(G, H)
    diff = G.locations[:, None, :] - H.locations[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return sq if r == 2 else np.sqrt(sq)


def _solve_transport(a: np.ndarray, b: np.ndarray, C: np.ndarray) -> np.ndarray:
    k, m = C.shape
    if k == 1:
        return b[None, :].copy()
    if m == 1:
        return a[:, None].copy()
    if k == 2 and m == 2:
        # one free coordinate t = q[0, 0]; the cost is linear in t, so an endpoint is optimal
        lo, hi = max(0.0, b[0] - a[1]), min(a[0], b[0])
        t = lo if C[0, 0] - C[0, 1] - C[1, 0] + C[1, 1] > 0 else hi
        return np.clip(np.array([[t, a[0] - t], [b[0] - t, a[1] - b[0] + t]]), 0.0, None)
    A_eq = np.zeros((k + m, k * m))
    for i in range(k):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[k + j, j::m] = 1.0
    b_eq = np.concatenate([a, b])
    # one equality is redundant; dropping it keeps the basis well posed
    res = linprog(
        C.ravel(), A_eq=A_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise MeasureError(f"transport LP failed: {res.message}")
    return np.clip(res.x.reshape(k, m), 0.0, None)


def wasserstein(G: MixingMeasure, H: MixingMeasure, r: int = 1) -> tuple[float, TransportPlan]:
    """Exact order-``r`` Wasserstein distance and an optimal coupling.

    Zero-weight atoms are dropped before solving; the returned plan is indexed
    by the original atoms (dropped rows/columns are zero).
    """
    if r not in (1, 2):
        raise MeasureError("order r must be 1 or 2")
    _check_compatible(G, H)
    for M in (G, H):
        if abs(M.weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError("measures must be normalized")
    ig = np.flatnonzero(G.weights > ZERO_WEIGHT_TOL)
    ih = np.flatnonzero(H.weights > ZERO_WEIGHT_TOL)
    a = G.weights[ig] / G.weights[ig].sum()
    b = H.weights[ih] / H.weights[ih].sum()
    C = cost_matrix(G, H, r)[np.ix_(ig, ih)]
    q_sub = _solve_transport(a, b, C)
    cost = max(float(np.sum(q_sub * C)), 0.0)
    q = np.zeros((G.k, H.k))
    q[np.ix_(ig, ih)] = q_sub
    return cost ** (1.0 / r), TransportPlan(q, cost)


def wasserstein_distance(G: MixingMeasure, H: MixingMeasure, r: int = 1) -> float:
    return wasserstein(G, H, r)[0]


def perturb(
    G0: MixingMeasure,
    radius: float,
    seed,
    weight_radius: Optional[float] = None,
    box: Optional[Box] = None,
) -> MixingMeasure:
    """Random measure near ``G0`` with the same number of atoms.

    Every coordinate of every atom moves by an independent ``U(-radius, radius)``
    draw and is clamped to the box. Each weight moves by ``U(-weight_radius,
    weight_radius)`` (default ``radius``), is floored at a small positive value
    and the vector is renormalized.
    """
    if not radius > 0:
        raise MeasureError("radius must be positive")
    rng = np.random.default_rng(seed)
    wr = radius if weight_radius is None else weight_radius
    box = box if box is not None else G0.box
    loc = G0.locations + rng.uniform(-radius, radius, size=G0.locations.shape)
    if box is not None:
        loc = np.clip(loc, box.lo, box.hi)
    w = G0.weights + rng.uniform(-wr, wr, size=G0.k) if wr > 0 else G0.weights.copy()
    w = np.maximum(w, 1e-6)
    w = w / w.sum()
    return MixingMeasure(w, loc[:, :G0.d1], loc[:, G0.d1:], box=box)


PERTURBATION_SCHEME = (
    "theta coordinates: iid U(-radius, radius) shift then clamp to box; "
    "weights: iid U(-weight_radius, weight_radius) shift, floor 1e-6, renormalize"
)
