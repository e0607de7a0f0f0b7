"""Named-axis probability tables and information measures.

All distributions are dense numpy arrays with named axes.  A table may be
conditioned on a subset of its axes, in which case every slice obtained by
fixing the conditioning axes is a normalized distribution over the remaining
ones.  Information quantities are computed in nats internally and exposed
through :class:`InfoValue`, which converts to bits on demand.

The convention 0 * log 0 = 0 is used everywhere.  Missing absolute continuity
is an error, never a silent clip.
"""

from dataclasses import dataclass, field
from math import log

import numpy as np
from scipy.special import xlogy

from .errors import (
    AbsoluteContinuityError,
    AxisMismatchError,
    DegenerateDistributionError,
    ParameterError,
    UndefinedSpecializationError,
)

LN2 = log(2.0)

# tolerance for "sums to one" checks after any operation
NORM_ATOL = 1e-12
# negative dust below this magnitude is treated as a genuine error
DUST_ATOL = 1e-9


@dataclass(frozen=True)
class InfoValue:
    """An information quantity stored in nats.

    invariant: non-negative up to floating dust (clamped at construction).
    """

    nats: float

    def __post_init__(self):
        if self.nats < -DUST_ATOL:
            raise ParameterError(f"negative information value: {self.nats}")
        if self.nats < 0.0:
            object.__setattr__(self, "nats", 0.0)

    @property
    def bits(self) -> float:
        return self.nats / LN2

    def __float__(self) -> float:
        return self.nats

    @classmethod
    def from_bits(cls, bits: float) -> "InfoValue":
        return cls(bits * LN2)


@dataclass(frozen=True)
class ProbTable:
    """Immutable dense probability table with named axes.

    ``axes`` is an ordered tuple of axis names matching ``values.shape``.
    ``conditioned`` lists the axes that the table is conditioned on; for every
    assignment of the conditioned axes the remaining entries sum to one within
    1e-12.  ``degenerate`` optionally marks conditioned slices that carried no
    probability mass and were replaced by a uniform distribution.
    """

    values: np.ndarray
    axes: tuple
    conditioned: tuple = ()
    degenerate: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        axes = tuple(self.axes)
        cond = tuple(self.conditioned)
        if vals.ndim != len(axes):
            raise AxisMismatchError(
                f"{vals.ndim} array dimensions for {len(axes)} axis names"
            )
        if len(set(axes)) != len(axes):
            raise AxisMismatchError(f"duplicate axis names in {axes}")
        if not set(cond) <= set(axes):
            raise AxisMismatchError(f"conditioned axes {cond} not among {axes}")
        if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
            raise ParameterError("probabilities must be finite and non-negative")
        dist_idx = tuple(i for i, a in enumerate(axes) if a not in cond)
        if not dist_idx:
            raise AxisMismatchError("table conditions on every axis")
        sums = vals.sum(axis=dist_idx)
        if not np.allclose(sums, 1.0, rtol=0.0, atol=NORM_ATOL):
            worst = float(np.abs(sums - 1.0).max())
            raise DegenerateDistributionError(
                f"slice sums deviate from 1 by up to {worst:.3e}"
            )
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "conditioned", cond)
        if self.degenerate is not None:
            deg = np.asarray(self.degenerate, dtype=bool)
            cond_shape = tuple(vals.shape[axes.index(a)] for a in cond)
            if deg.shape != cond_shape:
                raise AxisMismatchError("degenerate mask shape mismatch")
            deg = deg.copy()
            deg.setflags(write=False)
            object.__setattr__(self, "degenerate", deg)

    @property
    def distribution_axes(self) -> tuple:
        return tuple(a for a in self.axes if a not in self.conditioned)

    def card(self, axis: str) -> int:
        return self.values.shape[self.axes.index(axis)]

    def values_as(self, axes) -> np.ndarray:
        """Return the value array transposed to the given axis-name order."""
        axes = tuple(axes)
        if set(axes) != set(self.axes) or len(axes) != len(self.axes):
            raise AxisMismatchError(f"{axes} is not a permutation of {self.axes}")
        return np.transpose(self.values, [self.axes.index(a) for a in axes])

    @classmethod
    def uniform(cls, axes, cards, conditioned=()) -> "ProbTable":
        axes = tuple(axes)
        cards = tuple(cards)
        cond = tuple(conditioned)
        n = 1
        for a, c in zip(axes, cards):
            if a not in cond:
                n *= c
        return cls(np.full(cards, 1.0 / n), axes, cond)


def normalize(table, axes=None, conditioned_on=()) -> ProbTable:
    """Normalize non-negative weights into a ProbTable.

    Accepts either a ProbTable (renormalized, idempotent) or a raw array with
    explicit axis names.  Raises DegenerateDistributionError when a slice of
    the conditioning axes has no mass at all.  Zero entries stay zero.
    """
    if isinstance(table, ProbTable):
        vals, axes, cond = table.values, table.axes, table.conditioned
    else:
        vals = np.asarray(table, dtype=float)
        if axes is None:
            axes = tuple(f"x{i}" for i in range(vals.ndim))
        axes = tuple(axes)
        cond = tuple(conditioned_on)
    if np.any(vals < 0.0):
        raise ParameterError("weights must be non-negative")
    dist_idx = tuple(i for i, a in enumerate(axes) if a not in cond)
    sums = vals.sum(axis=dist_idx, keepdims=True)
    if np.any(sums == 0.0):
        raise DegenerateDistributionError("a slice has zero total mass")
    return ProbTable(vals / sums, axes, cond)


def marginalize_condition(table: ProbTable, keep, given=()) -> ProbTable:
    """From an unconditioned joint, build p(keep | given).

    Axes not listed are summed out.  Slices with p(given) = 0 become uniform
    and are flagged in the result's ``degenerate`` mask.  Resulting axis order
    is (given..., keep...) in the order given here.
    """
    keep = tuple(keep)
    given = tuple(given)
    if table.conditioned:
        raise AxisMismatchError("marginalize_condition expects an unconditioned joint")
    wanted = given + keep
    if len(set(wanted)) != len(wanted) or not set(wanted) <= set(table.axes):
        raise AxisMismatchError(f"bad axis selection {wanted} from {table.axes}")
    if not keep:
        raise AxisMismatchError("nothing to keep")
    vals = table.values_as(
        wanted + tuple(a for a in table.axes if a not in wanted)
    )
    vals = vals.reshape(vals.shape[: len(wanted)] + (-1,)).sum(axis=-1)
    if not given:
        return ProbTable(vals, keep)
    keep_idx = tuple(range(len(given), len(wanted)))
    mass = vals.sum(axis=keep_idx, keepdims=True)
    zero = mass == 0.0
    n_keep = 1
    for i in keep_idx:
        n_keep *= vals.shape[i]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(zero, 1.0 / n_keep, vals / np.where(zero, 1.0, mass))
    deg = zero.reshape([vals.shape[i] for i in range(len(given))])
    return ProbTable(out, wanted, given, degenerate=deg if deg.any() else None)


def _aligned_pair(p: ProbTable, q: ProbTable):
    if p.conditioned or q.conditioned:
        raise AxisMismatchError(
            "kl_divergence works on unconditioned tables; "
            "use expected_agent_kl for conditional slices"
        )
    if set(p.axes) != set(q.axes):
        raise AxisMismatchError(f"axes differ: {p.axes} vs {q.axes}")
    return p.values, q.values_as(p.axes)


def kl_divergence(p: ProbTable, q: ProbTable) -> InfoValue:
    """D_KL(p || q) in nats, aligned by axis name.

    Requires q > 0 wherever p > 0; a violation raises
    AbsoluteContinuityError instead of clipping.
    """
    pv, qv = _aligned_pair(p, q)
    support = pv > 0.0
    if np.any(qv[support] == 0.0):
        raise AbsoluteContinuityError("reference is zero on the support")
    val = float(np.sum(pv[support] * (np.log(pv[support]) - np.log(qv[support]))))
    return InfoValue(val)


def entropy(p: ProbTable) -> InfoValue:
    if p.conditioned:
        raise AxisMismatchError("entropy expects an unconditioned table")
    return InfoValue(-float(xlogy(p.values, p.values).sum()))


def conditional_mutual_information(
    joint: ProbTable, target, sources, given=()
) -> InfoValue:
    """I(sources ; target | given) in nats from an unconditioned joint.

    With ``given`` empty this is the plain mutual information.  Axes of the
    joint that appear nowhere are marginalized out first.
    """
    target = (target,) if isinstance(target, str) else tuple(target)
    sources = (sources,) if isinstance(sources, str) else tuple(sources)
    given = (given,) if isinstance(given, str) else tuple(given)
    if joint.conditioned:
        raise AxisMismatchError("expects an unconditioned joint")
    groups = given + sources + target
    if len(set(groups)) != len(groups) or not set(groups) <= set(joint.axes):
        raise AxisMismatchError(f"bad axis selection {groups} from {joint.axes}")
    vals = joint.values_as(groups + tuple(a for a in joint.axes if a not in groups))
    vals = vals.reshape(vals.shape[: len(groups)] + (-1,)).sum(axis=-1)
    ng, ns = len(given), len(sources)
    g_idx = tuple(range(ng))
    s_idx = tuple(range(ng, ng + ns))
    t_idx = tuple(range(ng + ns, len(groups)))
    pg = vals.sum(axis=s_idx + t_idx, keepdims=True) if ng else np.float64(1.0)
    pst = vals
    psg = vals.sum(axis=t_idx, keepdims=True)
    ptg = vals.sum(axis=s_idx, keepdims=True)
    mask = pst > 0.0
    num = pst * np.where(mask, 1.0, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(mask, pst * pg / (psg * ptg), 1.0)
    val = float(np.sum(num * np.log(ratio)))
    return InfoValue(val)


def specialization(prior: ProbTable) -> float:
    """1 - H(prior) / log |X|, in [0, 1] and independent of the log base.

    0 for the uniform distribution, 1 for a point mass.  Undefined (raises)
    when the choice space has a single element.
    """
    if prior.conditioned:
        raise AxisMismatchError("specialization expects an unconditioned table")
    p = prior.values.reshape(-1)
    n = p.size
    if n <= 1:
        raise UndefinedSpecializationError("choice space has one element")
    h = -float(xlogy(p, p).sum())
    s = 1.0 - h / log(n)
    return min(1.0, max(0.0, s))


def expected_agent_kl(
    posterior: ProbTable, prior: ProbTable, input_weights: ProbTable
) -> InfoValue:
    """Average KL between an agent's posterior slices and its prior.

    ``posterior`` is conditioned on the agent's input axes, ``prior`` is the
    unconditioned distribution over the same choice axes, and
    ``input_weights`` is the distribution of the inputs.  Slices with zero
    weight are skipped (0 * log 0 convention).
    """
    in_axes = tuple(posterior.conditioned)
    choice_axes = posterior.distribution_axes
    if set(prior.axes) != set(choice_axes) or prior.conditioned:
        raise AxisMismatchError("prior axes must match the posterior's choice axes")
    if set(input_weights.axes) != set(in_axes) or input_weights.conditioned:
        raise AxisMismatchError("weight axes must match the posterior's inputs")
    pv = posterior.values_as(in_axes + choice_axes)
    n_in = int(np.prod(pv.shape[: len(in_axes)])) if in_axes else 1
    pv = pv.reshape(n_in, -1)
    qv = prior.values_as(choice_axes).reshape(-1)
    wv = input_weights.values_as(in_axes).reshape(-1)
    total = 0.0
    for i in range(n_in):
        if wv[i] == 0.0:
            continue
        row = pv[i]
        support = row > 0.0
        if np.any(qv[support] == 0.0):
            raise AbsoluteContinuityError("prior is zero on a posterior's support")
        total += wv[i] * float(
            np.sum(row[support] * (np.log(row[support]) - np.log(qv[support])))
        )
    return InfoValue(total)
