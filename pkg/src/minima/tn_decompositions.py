"""Tucker, tensor-train, and tensor-ring decompositions of weight tensors.

Rank conventions:

* Tucker ranks are per-mode, ``core.shape == ranks`` and factor k is
  ``(mode_shape[k], ranks[k])``;
* TT bond ranks are the d-1 interior bonds, core k is
  ``(r_{k-1}, mode_shape[k], r_k)`` with boundary ranks 1;
* TR ranks are a cyclic vector of d values where ``ranks[k]`` is the left
  bond of core k, so ``ranks[0]`` is the bond that closes the ring
  (core d-1's right bond). A TR with ``ranks[0] == 1`` is structurally a
  TT with bonds ``ranks[1:]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from minima.errors import InfeasibleBudgetError, NumericsError, RankError, ShapeError
from minima.tensor_core import (
    FixedRank,
    ParamBudget,
    RelativeError,
    TruncationPolicy,
    _complete_basis,
    as_tensor,
    frobenius,
    mode_dot,
    relative_error,
    reshape_to_modes,
    truncated_svd,
    unfold,
)

log = logging.getLogger(__name__)

FAMILIES = ("tucker", "tt", "tr")
DENSE = "dense"


def balanced_split(n: int) -> tuple[int, ...]:
    """Closest-to-square divisor pair of ``n``; primes stay whole."""
    if n <= 1:
        return (max(n, 1),)
    a = 1
    for cand in range(int(math.isqrt(n)), 1, -1):
        if n % cand == 0:
            a = cand
            break
    if a == 1:
        return (n,)
    return (a, n // a)


def default_mode_shape(rows: int, cols: int) -> tuple[tuple[int, ...], int]:
    """Mode shape for a rows x cols matrix: row factors first."""
    row_modes = balanced_split(rows)
    col_modes = balanced_split(cols)
    return row_modes + col_modes, len(row_modes)


@dataclass
class CompressedLayer:
    """Tagged union over the supported layer storage formats."""

    family: str
    mode_shape: tuple[int, ...]
    row_mode_count: int
    matrix: np.ndarray | None = None  # dense
    core: np.ndarray | None = None  # tucker
    factors: list[np.ndarray] = field(default_factory=list)  # tucker
    cores: list[np.ndarray] = field(default_factory=list)  # tt / tr

    def __post_init__(self):
        self.mode_shape = tuple(int(s) for s in self.mode_shape)
        self.validate()

    @property
    def matrix_shape(self) -> tuple[int, int]:
        rows = math.prod(self.mode_shape[: self.row_mode_count])
        return rows, math.prod(self.mode_shape) // rows

    @property
    def ranks(self) -> tuple[int, ...] | None:
        if self.family == "tucker":
            return tuple(self.core.shape)
        if self.family == "tt":
            return tuple(c.shape[2] for c in self.cores[:-1])
        if self.family == "tr":
            return tuple(c.shape[0] for c in self.cores)
        return None

    def validate(self) -> None:
        d = len(self.mode_shape)
        if not 1 <= self.row_mode_count < d:
            raise ShapeError(f"row_mode_count {self.row_mode_count} invalid for {d} modes")
        if self.family == DENSE:
            if self.matrix is None or self.matrix.shape != self.matrix_shape:
                raise ShapeError("dense layer must hold its matricized payload")
        elif self.family == "tucker":
            if self.core is None or len(self.factors) != d:
                raise ShapeError("tucker layer needs a core and one factor per mode")
            for k, f in enumerate(self.factors):
                if f.shape != (self.mode_shape[k], self.core.shape[k]):
                    raise ShapeError(f"tucker factor {k} has shape {f.shape}")
        elif self.family in ("tt", "tr"):
            if len(self.cores) != d:
                raise ShapeError(f"{self.family} layer needs {d} cores")
            for k, c in enumerate(self.cores):
                if c.ndim != 3 or c.shape[1] != self.mode_shape[k]:
                    raise ShapeError(f"core {k} has shape {c.shape}")
                nxt = self.cores[(k + 1) % d]
                if k + 1 < d and c.shape[2] != nxt.shape[0]:
                    raise ShapeError("chain bond mismatch")
            if self.family == "tt":
                if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
                    raise ShapeError("tt boundary ranks must be 1")
            else:
                if self.cores[-1].shape[2] != self.cores[0].shape[0]:
                    raise ShapeError("tr closing bond mismatch")
        else:
            raise ShapeError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class RankSpec:
    """Concrete ranks for a family, or a relative-error threshold to resolve them."""

    family: str
    ranks: tuple[int, ...] | None = None
    rel_error: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES and self.family != DENSE:
            raise RankError(f"unknown family {self.family!r}")
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
            if any(r < 1 for r in self.ranks):
                raise RankError(f"ranks must be >= 1, got {self.ranks}")


# --- decomposition routines -------------------------------------------------


def _orthonormal_factor(unfolding: np.ndarray, rank: int) -> np.ndarray:
    """Leading left singular vectors, padded to ``rank`` orthonormal columns."""
    reachable = min(unfolding.shape)
    keep = min(rank, reachable)
    u = truncated_svd(unfolding, FixedRank(keep)).left
    if keep < rank:
        padded = np.zeros((unfolding.shape[0], rank))
        padded[:, :keep] = u
        _complete_basis(padded, keep)
        return padded
    return u


def _tucker_core(t: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    core = t
    for k, f in enumerate(factors):
        core = mode_dot(core, f, k)
    return core


def tucker_decompose(t: np.ndarray, ranks, hooi_iters: int = 2) -> CompressedLayer:
    """HOSVD initialization plus ``hooi_iters`` alternating refinement sweeps.

    Each sweep recomputes every factor from the unfolding of the tensor
    projected onto the other factors; the reconstruction error is checked
    to be non-increasing across sweeps (1e-12 slack).
    """
    t = as_tensor(t)
    d = t.ndim
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != d:
        raise RankError(f"need {d} ranks, got {len(ranks)}")
    for k, r in enumerate(ranks):
        if not 1 <= r <= t.shape[k]:
            raise RankError(f"rank {r} out of range [1, {t.shape[k]}] for mode {k}")

    factors = [_orthonormal_factor(unfold(t, k), ranks[k]) for k in range(d)]
    norm = frobenius(t)

    def current_error() -> float:
        if norm == 0.0:
            return 0.0
        core_norm = frobenius(_tucker_core(t, factors))
        return math.sqrt(max(norm**2 - core_norm**2, 0.0)) / norm

    err = current_error()
    for sweep in range(hooi_iters):
        for k in range(d):
            proj = t
            for j in range(d):
                if j != k:
                    proj = mode_dot(proj, factors[j], j)
            factors[k] = _orthonormal_factor(unfold(proj, k), ranks[k])
        new_err = current_error()
        if new_err > err + 1e-12:
            raise NumericsError(f"refinement sweep {sweep} increased error {err} -> {new_err}")
        err = new_err

    core = _tucker_core(t, factors)
    return CompressedLayer(
        family="tucker", mode_shape=t.shape, row_mode_count=1, core=core, factors=factors
    )


def _as_policy_list(policy, count: int) -> list[TruncationPolicy]:
    if isinstance(policy, (FixedRank, RelativeError, ParamBudget)):
        return [policy] * count
    policies = list(policy)
    if len(policies) != count:
        raise RankError(f"need {count} per-bond policies, got {len(policies)}")
    return policies


def tt_decompose(t: np.ndarray, policy) -> CompressedLayer:
    """Sequential TT-SVD with one truncation policy per bond.

    Fixed ranks are capped at each split's feasible maximum. When every
    bond uses a RelativeError threshold the final reconstruction is
    checked against the sqrt(sum of squared thresholds) error bound.
    """
    t = as_tensor(t)
    d = t.ndim
    if d < 2:
        raise ShapeError("tensor-train needs at least 2 modes")
    policies = _as_policy_list(policy, d - 1)
    shape = t.shape

    cores = []
    r_prev = 1
    c = t.reshape(shape[0], -1)
    for k in range(d - 1):
        c = c.reshape(r_prev * shape[k], -1)
        pol = policies[k]
        if isinstance(pol, FixedRank):
            pol = FixedRank(min(pol.rank, min(c.shape)))
        res = truncated_svd(c, pol)
        cores.append(res.left.reshape(r_prev, shape[k], res.rank))
        c = res.values[:, None] * res.right.T
        r_prev = res.rank
    cores.append(c.reshape(r_prev, shape[d - 1], 1))

    layer = CompressedLayer(family="tt", mode_shape=shape, row_mode_count=1, cores=cores)
    if all(isinstance(p, RelativeError) for p in policies) and frobenius(t) > 0:
        bound = math.sqrt(sum(p.epsilon**2 for p in policies))
        measured = relative_error(t, reconstruct(layer))
        if measured > bound + 1e-12:
            raise NumericsError(f"tt error {measured} exceeds bound {bound}")
    return layer


def tr_feasible(mode_shape, ranks) -> tuple[int, ...]:
    """Ranks actually reachable by the sequential ring factorization.

    The first split must carry ranks[0]*ranks[1] exactly; later bonds are
    capped by the running split dimensions.
    """
    shape = tuple(int(s) for s in mode_shape)
    ranks = tuple(int(r) for r in ranks)
    d = len(shape)
    if len(ranks) != d:
        raise RankError(f"need {d} cyclic ranks, got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise RankError(f"ranks must be >= 1, got {ranks}")
    rest = math.prod(shape[1:])
    if ranks[0] * ranks[1 % d] > min(shape[0], rest):
        raise RankError(
            f"first split rank {ranks[0]}*{ranks[1 % d]} infeasible for {shape[0]}x{rest} unfolding"
        )
    achieved = [ranks[0], ranks[1 % d]]
    r_prev = ranks[1 % d]
    cols = rest * ranks[0]
    for k in range(1, d - 1):
        rows = r_prev * shape[k]
        cols //= shape[k]
        r_next = min(ranks[k + 1], rows, cols)
        achieved.append(r_next)
        r_prev = r_next
    return tuple(achieved[:d])


def _padded_split(c: np.ndarray, rank: int):
    """Truncated SVD split ``c ~ u @ rest`` with ``u`` zero-padded to ``rank`` columns.

    Padding past the unfolding's min dimension stores dead zeros but keeps the
    requested core shapes, so parameter accounting stays closed-form.
    """
    keep = min(rank, min(c.shape))
    res = truncated_svd(c, FixedRank(keep))
    u = np.zeros((c.shape[0], rank))
    u[:, :keep] = res.left
    rest = np.zeros((rank, c.shape[1]))
    rest[:keep] = res.values[:, None] * res.right.T
    return u, rest


def tr_decompose(t: np.ndarray, ranks) -> CompressedLayer:
    """Sequential-SVD ring factorization (approximate; not ALS-optimal).

    The first unfolding is truncated at rank ``ranks[0] * ranks[1]`` and
    that bond is split in two; remaining cores come from a TT-style sweep
    with the closing bond carried along as a trailing mode. The first
    split must fit the unfolding's column count; splits are zero-padded
    up to the requested ranks otherwise.
    """
    t = as_tensor(t)
    d = t.ndim
    if d < 2:
        raise ShapeError("tensor-ring needs at least 2 modes")
    shape = t.shape
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != d:
        raise RankError(f"need {d} cyclic ranks, got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise RankError(f"ranks must be >= 1, got {ranks}")
    rest_size = math.prod(shape[1:])
    r0, r1 = ranks[0], ranks[1 % d]
    if r0 * r1 > rest_size:
        raise RankError(
            f"first split rank {r0}*{r1} infeasible for {shape[0]}x{rest_size} unfolding"
        )

    c = t.reshape(shape[0], -1)
    u, m = _padded_split(c, r0 * r1)
    core0 = u.reshape(shape[0], r0, r1).transpose(1, 0, 2)
    c = np.ascontiguousarray(np.moveaxis(m.reshape(r0, r1, -1), 0, -1))  # (r1, rest..., r0)

    cores = [np.ascontiguousarray(core0)]
    r_prev = r1
    for k in range(1, d - 1):
        c = c.reshape(r_prev * shape[k], -1)
        u, c = _padded_split(c, ranks[k + 1])
        cores.append(u.reshape(r_prev, shape[k], ranks[k + 1]))
        r_prev = ranks[k + 1]
    cores.append(c.reshape(r_prev, shape[d - 1], r0))
    return CompressedLayer(family="tr", mode_shape=shape, row_mode_count=1, cores=cores)


def reconstruct(layer: CompressedLayer) -> np.ndarray:
    """Dense tensor of the layer's mode shape."""
    layer.validate()
    if layer.family == DENSE:
        return layer.matrix.reshape(layer.mode_shape)
    if layer.family == "tucker":
        out = layer.core
        for k, f in enumerate(layer.factors):
            out = mode_dot(out, f.T, k)
        return out
    chain = layer.cores[0]
    for core in layer.cores[1:]:
        chain = np.tensordot(chain, core, axes=(chain.ndim - 1, 0))
    if layer.family == "tt":
        return chain.reshape(layer.mode_shape)
    return np.trace(chain, axis1=0, axis2=chain.ndim - 1)


def layer_to_matrix(layer: CompressedLayer) -> np.ndarray:
    return reconstruct(layer).reshape(layer.matrix_shape)


def param_count(layer: CompressedLayer) -> int:
    """Stored scalars in the layer payload."""
    if layer.family == DENSE:
        return int(layer.matrix.size)
    if layer.family == "tucker":
        return int(layer.core.size + sum(f.size for f in layer.factors))
    return int(sum(c.size for c in layer.cores))


def compression_ratio(layer: CompressedLayer) -> float:
    return param_count(layer) / math.prod(layer.mode_shape)


def param_count_formula(family: str, mode_shape, ranks) -> int:
    """Closed-form stored-scalar count for a (family, ranks) configuration."""
    shape = tuple(int(s) for s in mode_shape)
    if family == DENSE:
        return math.prod(shape)
    ranks = tuple(int(r) for r in ranks)
    d = len(shape)
    if family == "tucker":
        if len(ranks) != d:
            raise RankError(f"need {d} tucker ranks")
        return math.prod(ranks) + sum(n * r for n, r in zip(shape, ranks))
    if family == "tt":
        if len(ranks) != d - 1:
            raise RankError(f"need {d - 1} tt bond ranks")
        bonds = (1,) + ranks + (1,)
        return sum(bonds[k] * shape[k] * bonds[k + 1] for k in range(d))
    if family == "tr":
        if len(ranks) != d:
            raise RankError(f"need {d} tr ranks")
        return sum(ranks[k] * shape[k] * ranks[(k + 1) % d] for k in range(d))
    raise RankError(f"unknown family {family!r}")


def maximal_ranks(family: str, mode_shape) -> tuple[int, ...]:
    """Smallest ranks that make the decomposition exact for any tensor."""
    shape = tuple(int(s) for s in mode_shape)
    d = len(shape)
    total = math.prod(shape)
    if family == "tucker":
        return tuple(min(n, total // n) for n in shape)
    tt = tuple(
        min(math.prod(shape[: k + 1]), math.prod(shape[k + 1 :])) for k in range(d - 1)
    )
    if family == "tt":
        return tt
    if family == "tr":
        return (1,) + tt
    raise RankError(f"unknown family {family!r}")


def _rank_positions(family: str, d: int) -> int:
    return {"tucker": d, "tt": d - 1, "tr": d}[family]


def _ranks_feasible(family: str, shape, ranks) -> bool:
    caps = maximal_ranks(family, shape)
    if family == "tucker":
        return all(r <= n for r, n in zip(ranks, shape))
    if family == "tt":
        if any(r > c for r, c in zip(ranks, caps)):
            return False
        # sequential achievability: each bond fits the running split rows
        left = 1
        for k, r in enumerate(ranks):
            if r > left * shape[k]:
                return False
            left = r
        return True
    try:
        return tuple(tr_feasible(shape, ranks)) == tuple(ranks)
    except RankError:
        return False


def select_ranks(mode_shape, family: str, target: TruncationPolicy) -> RankSpec:
    """Rank selection toward a truncation target.

    ParamBudget: budgets at or above the dense size return the maximal
    (exact) ranks; otherwise the largest feasible uniform rank is found
    and individual positions are then greedily incremented in ascending
    order while the budget allows. RelativeError targets defer to
    per-bond / per-mode thresholds applied during decomposition.
    """
    shape = tuple(int(s) for s in mode_shape)
    if family == DENSE:
        return RankSpec(family=DENSE)
    if family not in FAMILIES:
        raise RankError(f"unknown family {family!r}")
    d = len(shape)
    npos = _rank_positions(family, d)

    if isinstance(target, RelativeError):
        return RankSpec(family=family, ranks=None, rel_error=target.epsilon)

    if isinstance(target, FixedRank):
        caps = maximal_ranks(family, shape)
        ranks = tuple(min(target.rank, c) for c in caps)
        while not _ranks_feasible(family, shape, ranks):
            ranks = tuple(max(1, r - 1) if i == int(np.argmax(ranks)) else r for i, r in enumerate(ranks))
        return RankSpec(family=family, ranks=ranks)

    if not isinstance(target, ParamBudget):
        raise TypeError(f"unsupported target {target!r}")

    budget = target.budget
    dense_size = math.prod(shape)
    if budget >= dense_size:
        return RankSpec(family=family, ranks=maximal_ranks(family, shape))

    caps = maximal_ranks(family, shape)
    floor = tuple([1] * npos)
    floor_cost = param_count_formula(family, shape, floor)
    if floor_cost > budget:
        raise InfeasibleBudgetError(
            f"budget {budget} below rank-1 configuration of {floor_cost} params",
            best_achievable=floor_cost,
        )

    def fits(ranks) -> bool:
        return (
            all(r <= c for r, c in zip(ranks, caps))
            and _ranks_feasible(family, shape, ranks)
            and param_count_formula(family, shape, ranks) <= budget
        )

    uniform = 1
    while fits(tuple([uniform + 1] * npos)):
        uniform += 1
    ranks = [uniform] * npos

    changed = True
    while changed:
        changed = False
        for i in range(npos):
            trial = list(ranks)
            trial[i] += 1
            if fits(tuple(trial)):
                ranks = trial
                changed = True
    return RankSpec(family=family, ranks=tuple(ranks))


def decompose(t: np.ndarray, spec: RankSpec, hooi_iters: int = 2, row_mode_count: int = 1) -> CompressedLayer:
    """Dispatch a tensor to the decomposition named by ``spec``."""
    t = as_tensor(t)
    d = t.ndim
    if spec.family == DENSE:
        rows = math.prod(t.shape[:row_mode_count])
        return CompressedLayer(
            family=DENSE,
            mode_shape=t.shape,
            row_mode_count=row_mode_count,
            matrix=t.reshape(rows, -1),
        )
    if spec.family == "tucker":
        if spec.ranks is not None:
            layer = tucker_decompose(t, spec.ranks, hooi_iters=hooi_iters)
        else:
            eps = spec.rel_error / math.sqrt(d)
            ranks = tuple(
                truncated_svd(unfold(t, k), RelativeError(eps)).rank for k in range(d)
            )
            layer = tucker_decompose(t, ranks, hooi_iters=hooi_iters)
    elif spec.family == "tt":
        if spec.ranks is not None:
            layer = tt_decompose(t, [FixedRank(r) for r in spec.ranks])
        else:
            layer = tt_decompose(t, RelativeError(spec.rel_error / math.sqrt(d - 1)))
    elif spec.family == "tr":
        if spec.ranks is not None:
            layer = tr_decompose(t, spec.ranks)
        else:
            tt = tt_decompose(t, RelativeError(spec.rel_error / math.sqrt(d - 1)))
            layer = CompressedLayer(
                family="tr", mode_shape=t.shape, row_mode_count=row_mode_count, cores=tt.cores
            )
    else:
        raise RankError(f"unknown family {spec.family!r}")
    layer.row_mode_count = row_mode_count
    layer.validate()
    return layer


def compress_matrix(
    w: np.ndarray,
    family: str,
    target: TruncationPolicy,
    hooi_iters: int = 2,
) -> CompressedLayer:
    """Reshape a weight matrix into balanced modes and decompose it."""
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError("compress_matrix expects a matrix")
    mode_shape, row_mode_count = default_mode_shape(*w.shape)
    t = reshape_to_modes(w, mode_shape)
    spec = select_ranks(mode_shape, family, target) if family != DENSE else RankSpec(DENSE)
    return decompose(t, spec, hooi_iters=hooi_iters, row_mode_count=row_mode_count)
