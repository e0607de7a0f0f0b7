"""Coordinate-ascent solver for chained information-constrained agents.

The engine works on dense arrays indexed by the variables x0..xN, where x0 is
the world state and xN the final action.  Every per-node quantity keeps full
rank with singleton axes elsewhere, so numpy broadcasting aligns everything.

One sweep visits the nodes in order.  For node k it forms the effective
utility F_k: the conditional expectation, given the node's own variables, of
the raw utility minus the downstream information costs log(P_i/p_i)/beta_i.
The posterior then gets a Boltzmann update P_k proportional to
p_k * exp(beta_k * F_k), computed in the log domain with a per-slice maximum
subtracted so that beta up to 1e6 stays finite.  The prior p_k is the
conditional marginal of the rebuilt joint.  Free energy never decreases over
a sweep; iteration stops when the joint moves less than epsilon in max norm.

Betas are per agent: each node carries an array over its selector values, in
units of one over nats (utilities per nat of processed information).
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .architecture import (
    ArchitectureSpec,
    NodeSpec,
    agent_roster,
    parse_label,
    validate_architecture,
)
from .errors import (
    ConvergenceError,
    ParameterError,
    SupportCollapseError,
    WiringError,
)
from .tables import LN2, ProbTable

BETA_MIN = 1e-3
BETA_MAX = 1e6


# --------------------------------------------------------------------- betas


@dataclass
class BetaAssignment:
    """Per-agent inverse temperatures, one array per node over its selectors.

    invariant: every beta is finite and strictly positive.  Budgets, when
    present, are per-agent processed-information bounds in bits, >= 0.
    """

    node_betas: dict
    budgets_bits: dict = None

    def __post_init__(self):
        clean = {}
        for k, arr in self.node_betas.items():
            arr = np.asarray(arr, dtype=float)
            if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0):
                raise ParameterError("betas must be finite and positive")
            clean[int(k)] = arr
        self.node_betas = clean
        if self.budgets_bits is not None:
            cleanb = {}
            for k, arr in self.budgets_bits.items():
                arr = np.asarray(arr, dtype=float)
                if np.any(arr < 0.0):
                    raise ParameterError("budgets must be non-negative")
                cleanb[int(k)] = arr
            self.budgets_bits = cleanb

    def beta(self, k: int) -> np.ndarray:
        return self.node_betas[k]

    @classmethod
    def uniform(cls, spec: ArchitectureSpec, beta: float, budgets_bits=None):
        betas = {}
        for nd in spec.nodes:
            shape = tuple(spec.card(s) for s in nd.selectors)
            betas[nd.index] = np.full(shape, float(beta))
        return cls(betas, budgets_bits)

    @classmethod
    def from_flat(cls, spec: ArchitectureSpec, values, budgets_bits=None):
        """Map a flat per-agent list (topological order) onto node arrays."""
        roster = agent_roster(spec)
        if len(values) != len(roster):
            raise ParameterError(
                f"{len(values)} values for {len(roster)} agents"
            )
        betas = {
            nd.index: np.empty(tuple(spec.card(s) for s in nd.selectors))
            for nd in spec.nodes
        }
        for (k, combo), v in zip(roster, values):
            betas[k][combo] = float(v)
        buds = None
        if budgets_bits is not None:
            if len(budgets_bits) != len(roster):
                raise ParameterError(
                    f"{len(budgets_bits)} budgets for {len(roster)} agents"
                )
            buds = {k: np.empty_like(b) for k, b in betas.items()}
            for (k, combo), v in zip(roster, budgets_bits):
                buds[k][combo] = float(v)
        return cls(betas, buds)

    def to_flat(self, spec: ArchitectureSpec):
        return [float(self.node_betas[k][combo]) for k, combo in agent_roster(spec)]


def agent_key(k: int, combo) -> str:
    if not combo:
        return f"x{k}"
    return f"x{k}|" + ",".join(str(c) for c in combo)


# -------------------------------------------------------------------- engine


def _expand(vals, axes, n_axes, cards):
    """Reshape an array given its axis indices into full rank."""
    vals = np.asarray(vals, dtype=float)
    order = np.argsort(axes)
    vals = np.transpose(vals, order)
    sorted_axes = [axes[i] for i in order]
    shape = [1] * n_axes
    for ax in sorted_axes:
        shape[ax] = cards[ax]
    return vals.reshape(shape)


class _Engine:
    def __init__(
        self,
        spec,
        u_vals,
        u_axes,
        rho,
        betas,
        fixed_priors=None,
        rng=None,
        noise=1e-2,
        init_posteriors=None,
        init_style="noise",
    ):
        issues = validate_architecture(spec)
        if issues:
            raise WiringError("; ".join(issues))
        self.spec = spec
        self.N = spec.depth
        self.nv = self.N + 1
        rho = np.asarray(rho, dtype=float)
        if rho.ndim != 1:
            raise WiringError("world prior must be one-dimensional")
        self.cards = [rho.shape[0]] + [nd.cardinality for nd in spec.nodes]
        u_vals = np.asarray(u_vals, dtype=float)
        for ax, dim in zip(u_axes, u_vals.shape):
            if self.cards[ax] != dim:
                raise WiringError(
                    f"utility axis x{ax} has {dim} entries, expected {self.cards[ax]}"
                )
        self.u_full = _expand(u_vals, list(u_axes), self.nv, self.cards)
        self.rho_full = _expand(rho, [0], self.nv, self.cards)
        self.sel = [()] + [nd.selectors for nd in spec.nodes]
        self.inp = [()] + [nd.inputs for nd in spec.nodes]
        self.own = [None] + [
            tuple(sorted(set(self.sel[k]) | set(self.inp[k]) | {k}))
            for k in range(1, self.nv)
        ]
        self.beta_full = [None]
        self.inv_beta_full = [None]
        for k in range(1, self.nv):
            arr = np.asarray(betas.beta(k), dtype=float)
            expect = tuple(self.cards[s] for s in self.sel[k])
            if arr.shape != expect:
                raise ParameterError(
                    f"beta array for node {k} has shape {arr.shape}, expected {expect}"
                )
            bf = _expand(arr, list(self.sel[k]), self.nv, self.cards) if arr.ndim else np.asarray(
                float(arr)
            ).reshape([1] * self.nv)
            self.beta_full.append(bf)
            with np.errstate(divide="ignore"):
                self.inv_beta_full.append(np.where(bf > 0, 1.0 / np.where(bf > 0, bf, 1.0), 0.0))
        self.optimize_priors = fixed_priors is None
        self.post = [None] * self.nv
        self.prior = [None] * self.nv
        self.prior_deg = [None] * self.nv
        self.logratio = [None] * self.nv
        self.penalty = [None] * self.nv
        self.logz = [None] * self.nv
        self.f_zero_mass = [0] * self.nv
        if fixed_priors is not None:
            for k in range(1, self.nv):
                src = fixed_priors[k - 1]
                if isinstance(src, ProbTable):
                    axes_idx = [int(a[1:]) for a in src.axes]
                    vals = src.values
                else:
                    axes_idx = sorted(set(self.sel[k]) | {k})
                    vals = np.asarray(src, dtype=float)
                self.prior[k] = _expand(vals, axes_idx, self.nv, self.cards)
                self.prior_deg[k] = np.zeros([], dtype=bool)
        letters = "abcdefghij"
        self._joint_sub = letters[: self.nv]
        self._u_sub = "".join(letters[i] for i in u_axes)
        self._u_compact = u_vals if list(u_axes) == sorted(u_axes) else np.transpose(
            u_vals, np.argsort(u_axes)
        )
        self._own_sub = [None] + [
            "".join(letters[i] for i in sorted(self.own[k]))
            for k in range(1, self.nv)
        ]
        self._init_posteriors(rng, noise, init_posteriors, init_style)
        self.rebuild_joint()
        if self.optimize_priors:
            for k in range(1, self.nv):
                self._prior_from_joint(k)
        for k in range(1, self.nv):
            self._refresh_penalty(k)

    # -- setup

    def _init_posteriors(self, rng, noise, init_posteriors, init_style="noise"):
        for k in range(1, self.nv):
            if init_posteriors is not None:
                src = init_posteriors[k - 1]
                if isinstance(src, ProbTable):
                    axes_idx = [int(a[1:]) for a in src.axes]
                    vals = _expand(src.values, axes_idx, self.nv, self.cards)
                else:
                    vals = np.asarray(src, dtype=float).reshape(
                        self._node_shape(k)
                    )
                if rng is not None and noise > 0:
                    # kick off the zero-gradient saddle where all
                    # posteriors sit exactly at their priors
                    vals = vals * (1.0 + rng.uniform(-noise, noise, size=vals.shape))
                self.post[k] = vals / vals.sum(axis=k, keepdims=True)
                continue
            shape = self._node_shape(k)
            base = self.prior[k] if not self.optimize_priors else np.ones(shape)
            raw = np.broadcast_to(base, shape).copy()
            if rng is not None:
                if init_style == "spiky":
                    # sharp random rows reach informative optima that a
                    # near-uniform start cannot: the all-flat saddle is
                    # locally stable below the critical temperature
                    raw = raw * (rng.gamma(0.3, size=shape) + 1e-9)
                elif noise > 0:
                    raw = raw * (1.0 + rng.uniform(-noise, noise, size=shape))
            self.post[k] = raw / raw.sum(axis=k, keepdims=True)

    def _node_shape(self, k):
        return tuple(
            self.cards[i] if i in self.own[k] else 1 for i in range(self.nv)
        )

    # -- pieces

    def rebuild_joint(self):
        j = self.rho_full
        for k in range(1, self.nv):
            j = j * self.post[k]
        self.joint = j

    def _prior_from_joint(self, k):
        keep = set(self.sel[k]) | {k}
        other = tuple(i for i in range(self.nv) if i not in keep)
        num = self.joint.sum(axis=other, keepdims=True)
        den = num.sum(axis=k, keepdims=True)
        zero = den == 0.0
        p = np.where(zero, 1.0 / self.cards[k], num / np.where(zero, 1.0, den))
        p = p / p.sum(axis=k, keepdims=True)
        self.prior[k] = p
        self.prior_deg[k] = zero

    def _refresh_penalty(self, k):
        post, prior = self.post[k], self.prior[k]
        mask = (post > 0.0) & (prior > 0.0)
        with np.errstate(divide="ignore"):
            ratio = np.where(
                mask,
                np.log(np.where(mask, post, 1.0)) - np.log(np.where(mask, prior, 1.0)),
                0.0,
            )
        self.logratio[k] = ratio
        self.penalty[k] = self.inv_beta_full[k] * ratio

    def effective_utility(self, k):
        """Conditional expectation of utility minus downstream costs.

        Contractions run term by term through einsum so no joint-sized
        temporary is materialized; this dominates the sweep cost on the
        larger architectures.
        """
        out = self._own_sub[k]
        num = np.einsum(
            f"{self._joint_sub},{self._u_sub}->{out}",
            self.joint,
            self._u_compact,
        )
        for i in range(k + 1, self.nv):
            pen = self._compact_own(self.penalty[i], i)
            num -= np.einsum(
                f"{self._joint_sub},{self._own_sub[i]}->{out}",
                self.joint,
                pen,
            )
        other = tuple(i for i in range(self.nv) if i not in self.own[k])
        den = self.joint.sum(axis=other)
        zero = den == 0.0
        f = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
        self.f_zero_mass[k] = int(zero.sum())
        shape = tuple(
            self.cards[i] if i in self.own[k] else 1 for i in range(self.nv)
        )
        return f.reshape(shape)

    def _compact_own(self, arr, k):
        idx = tuple(
            slice(None) if i in self.own[k] else 0 for i in range(self.nv)
        )
        return arr[idx]

    def update_posterior(self, k, f):
        with np.errstate(divide="ignore"):
            logp = np.log(self.prior[k])
        logits = logp + self.beta_full[k] * f
        shift = logits.max(axis=k, keepdims=True)
        ex = np.exp(logits - shift)
        z = ex.sum(axis=k, keepdims=True)
        if np.any(z == 0.0):
            raise SupportCollapseError(f"node {k} lost all posterior mass")
        post = ex / z
        self.logz[k] = shift + np.log(z)
        self.post[k] = post

    def sweep(self, fe_callback=None):
        for k in range(1, self.nv):
            f = self.effective_utility(k)
            self.update_posterior(k, f)
            self.rebuild_joint()
            if self.optimize_priors:
                self._prior_from_joint(k)
            self._refresh_penalty(k)
            if fe_callback is not None:
                fe_callback(self.free_energy())

    def free_energy(self) -> float:
        cost = 0.0
        for k in range(1, self.nv):
            cost = cost + self.penalty[k]
        return float((self.joint * (self.u_full - cost)).sum())

    def expected_utility(self) -> float:
        return float((self.joint * self.u_full).sum())

    def agent_kl_nats(self, k) -> np.ndarray:
        """Expected divergence per selector value: sum_x p(x) log(P_k/p_k)."""
        other = tuple(i for i in range(self.nv) if i not in self.sel[k])
        num = (self.joint * self.logratio[k]).sum(axis=other)
        den = self.joint.sum(axis=other)
        zero = den == 0.0
        return np.where(zero, 0.0, num / np.where(zero, 1.0, den))

    def compact(self, k, which) -> np.ndarray:
        """Drop singleton axes of a per-node array, keeping its own axes."""
        arr = {"post": self.post, "prior": self.prior, "logz": self.logz}[which][k]
        axes = self.own[k] if which != "prior" else tuple(
            sorted(set(self.sel[k]) | {k})
        )
        if which == "logz":
            axes = tuple(sorted(set(self.sel[k]) | set(self.inp[k])))
            if not axes:
                return np.asarray(float(arr.reshape(-1)[0]))
        idx = tuple(
            slice(None) if i in axes else 0 for i in range(self.nv)
        )
        return arr[idx]


# ------------------------------------------------------------------- solution


@dataclass
class Solution:
    """Converged (or best-found) state of a solved system."""

    spec: ArchitectureSpec
    posteriors: list
    priors: list
    joint: ProbTable
    betas: BetaAssignment
    world_prior: ProbTable
    utility: np.ndarray
    utility_axes: tuple
    diagnostics: dict = field(default_factory=dict)
    log_normalizers: list = None

    @property
    def free_energy(self) -> float:
        return self.diagnostics["free_energy"]

    @property
    def expected_utility(self) -> float:
        return self.diagnostics["expected_utility"]

    @property
    def converged(self) -> bool:
        return self.diagnostics["converged"]


def _axis_names(idxs):
    return tuple(f"x{i}" for i in idxs)


def _solution_from_engine(spec, engine, betas, rho, u_vals, u_axes, diag):
    posteriors = []
    priors = []
    logzs = []
    for k in range(1, engine.nv):
        own_sorted = tuple(sorted(set(engine.sel[k]) | set(engine.inp[k]))) + (k,)
        post_full = engine.post[k]
        idx = tuple(
            slice(None) if i in engine.own[k] else 0 for i in range(engine.nv)
        )
        vals = post_full[idx]
        present = [i for i in range(engine.nv) if i in engine.own[k]]
        order = [present.index(i) for i in own_sorted]
        vals = np.transpose(vals, order)
        posteriors.append(
            ProbTable(vals, _axis_names(own_sorted), _axis_names(own_sorted[:-1]))
        )
        prior_axes = tuple(sorted(set(engine.sel[k]))) + (k,)
        pidx = tuple(
            slice(None) if i in prior_axes else 0 for i in range(engine.nv)
        )
        pvals = engine.prior[k][pidx]
        ppresent = [i for i in range(engine.nv) if i in prior_axes]
        pvals = np.transpose(pvals, [ppresent.index(i) for i in prior_axes])
        deg = engine.prior_deg[k]
        deg_mask = None
        if deg is not None and np.any(deg):
            didx = tuple(
                slice(None) if i in engine.sel[k] else 0 for i in range(engine.nv)
            )
            deg_mask = deg[didx]
        priors.append(
            ProbTable(
                pvals,
                _axis_names(prior_axes),
                _axis_names(prior_axes[:-1]),
                degenerate=deg_mask,
            )
        )
        logzs.append(engine.compact(k, "logz"))
    joint = ProbTable(engine.joint, _axis_names(range(engine.nv)))
    return Solution(
        spec=spec,
        posteriors=posteriors,
        priors=priors,
        joint=joint,
        betas=betas,
        world_prior=ProbTable(np.asarray(rho, dtype=float), ("x0",)),
        utility=np.asarray(u_vals, dtype=float),
        utility_axes=tuple(u_axes),
        diagnostics=diag,
        log_normalizers=logzs,
    )


# ----------------------------------------------------------------- public ops


def build_joint(spec, world_prior, posteriors) -> ProbTable:
    """Chain the world prior and all node posteriors into the joint."""
    rho = world_prior.values if isinstance(world_prior, ProbTable) else np.asarray(world_prior)
    cards = [rho.shape[0]] + [nd.cardinality for nd in spec.nodes]
    nv = len(cards)
    j = _expand(rho, [0], nv, cards)
    for k, table in enumerate(posteriors, start=1):
        if isinstance(table, ProbTable):
            axes_idx = [int(a[1:]) for a in table.axes]
            vals = table.values
        else:
            nd = spec.node(k)
            axes_idx = sorted(set(nd.selectors) | set(nd.inputs) | {k})
            vals = np.asarray(table)
        j = j * _expand(vals, axes_idx, nv, cards)
    return ProbTable(j, _axis_names(range(nv)))


def update_prior(spec, joint: ProbTable, k: int) -> ProbTable:
    """Conditional marginal p(x_k | selectors) of the joint; zero-mass
    selector branches become flagged uniform slices."""
    from .tables import marginalize_condition

    nd = spec.node(k)
    return marginalize_condition(
        joint,
        keep=(f"x{k}",),
        given=tuple(f"x{s}" for s in sorted(nd.selectors)),
    )


def effective_utility_table(spec, utility, world_prior, posteriors, priors, betas, k):
    """F_k over the node's own variables, plus the zero-mass flag array."""
    u_vals, u_axes = _coerce_utility(utility, spec)
    engine = _engine_from_tables(spec, u_vals, u_axes, world_prior, posteriors, priors, betas)
    f = engine.effective_utility(k)
    own_sorted = tuple(sorted(engine.own[k]))
    idx = tuple(slice(None) if i in engine.own[k] else 0 for i in range(engine.nv))
    vals = f[idx]
    present = [i for i in range(engine.nv) if i in engine.own[k]]
    vals = np.transpose(vals, [present.index(i) for i in own_sorted])
    return vals, _axis_names(own_sorted)


def boltzmann_posterior(spec, prior, effective, beta, k) -> ProbTable:
    """Single Boltzmann step P propto prior * exp(beta * F) for node k.

    ``effective`` is (values, axis-names) as returned by
    effective_utility_table; beta may be a scalar or per-selector array.
    beta = 0 is accepted as the exact limit (posterior = prior).
    """
    nd = spec.node(k)
    f_vals, f_axes = effective
    cards = {}
    for name, dim in zip(f_axes, f_vals.shape):
        cards[int(name[1:])] = dim
    prior_vals = prior.values if isinstance(prior, ProbTable) else np.asarray(prior)
    if isinstance(prior, ProbTable):
        prior_idx = [int(a[1:]) for a in prior.axes]
    else:
        prior_idx = sorted(set(nd.selectors) | {k})
    for i, d in zip(prior_idx, prior_vals.shape):
        cards.setdefault(i, d)
    nv = max(cards) + 1
    full_cards = [cards.get(i, 1) for i in range(nv)]
    f_full = _expand(f_vals, [int(a[1:]) for a in f_axes], nv, full_cards)
    p_full = _expand(prior_vals, prior_idx, nv, full_cards)
    beta_arr = np.asarray(beta, dtype=float)
    b_full = (
        _expand(beta_arr, list(nd.selectors), nv, full_cards)
        if beta_arr.ndim
        else beta_arr.reshape([1] * nv)
    )
    with np.errstate(divide="ignore"):
        logits = np.log(p_full) + b_full * f_full
    shift = logits.max(axis=k, keepdims=True)
    ex = np.exp(logits - shift)
    z = ex.sum(axis=k, keepdims=True)
    if np.any(z == 0.0):
        raise SupportCollapseError(f"node {k} lost all posterior mass")
    post = ex / z
    own = tuple(sorted(set(nd.selectors) | set(nd.inputs))) + (k,)
    idx = tuple(slice(None) if (i in own) else 0 for i in range(nv))
    vals = post[idx]
    present = [i for i in range(nv) if i in own]
    vals = np.transpose(vals, [present.index(i) for i in own])
    return ProbTable(vals, _axis_names(own), _axis_names(own[:-1]))


def _coerce_utility(utility, spec):
    if hasattr(utility, "values") and not isinstance(utility, np.ndarray):
        u_vals = np.asarray(utility.values, dtype=float)
    else:
        u_vals = np.asarray(utility, dtype=float)
    if u_vals.ndim != 2:
        raise WiringError("utility must be a 2d world-by-action array")
    return u_vals, (0, spec.depth)


def _engine_from_tables(spec, u_vals, u_axes, world_prior, posteriors, priors, betas):
    rho = world_prior.values if isinstance(world_prior, ProbTable) else np.asarray(world_prior)
    engine = _Engine(
        spec,
        u_vals,
        u_axes,
        rho,
        betas,
        rng=None,
        noise=0.0,
        init_posteriors=posteriors,
    )
    if priors is not None:
        for k in range(1, engine.nv):
            src = priors[k - 1]
            if isinstance(src, ProbTable):
                axes_idx = [int(a[1:]) for a in src.axes]
                vals = src.values
            else:
                axes_idx = sorted(set(engine.sel[k]) | {k})
                vals = np.asarray(src)
            engine.prior[k] = _expand(vals, axes_idx, engine.nv, engine.cards)
        for k in range(1, engine.nv):
            engine._refresh_penalty(k)
    return engine


# ---------------------------------------------------------------------- solve


def solve(
    spec,
    utility,
    world_prior,
    betas,
    epsilon=1e-8,
    max_sweeps=2000,
    restarts=5,
    seed=0,
    init_noise=None,
    init_posteriors=None,
    fixed_priors=None,
    utility_axes=None,
    track_node_fe=False,
) -> Solution:
    """Run coordinate ascent, keeping the best restart by free energy.

    With ``init_posteriors`` the given start is used as a single warm run,
    exactly as passed unless ``init_noise`` asks for a perturbation.
    ``fixed_priors`` disables prior optimization (the priors stay as given).
    Non-convergence is flagged in the diagnostics, never raised.
    """
    if utility_axes is None:
        u_vals, u_axes = _coerce_utility(utility, spec)
    else:
        u_vals = np.asarray(utility, dtype=float)
        u_axes = tuple(utility_axes)
    rho = world_prior.values if isinstance(world_prior, ProbTable) else np.asarray(world_prior, dtype=float)
    if init_noise is None:
        init_noise = 0.0 if init_posteriors is not None else 1e-2
    if init_posteriors is not None:
        restarts = 1
    best = None
    for r in range(max(1, restarts)):
        rng = np.random.default_rng([int(seed), r])
        engine = _Engine(
            spec,
            u_vals,
            u_axes,
            rho,
            betas,
            fixed_priors=fixed_priors,
            rng=rng,
            noise=init_noise,
            init_posteriors=init_posteriors,
            init_style="spiky" if r % 2 else "noise",
        )
        fe_trace = [engine.free_energy()]
        node_fe = [] if track_node_fe else None
        converged = False
        sweeps = 0
        for sweeps in range(1, max_sweeps + 1):
            prev = engine.joint
            if track_node_fe:
                engine.sweep(fe_callback=node_fe.append)
            else:
                engine.sweep()
            fe_trace.append(engine.free_energy())
            if float(np.abs(engine.joint - prev).max()) < epsilon:
                converged = True
                break
        kl = {}
        spx = {}
        for k in range(1, engine.nv):
            arr = engine.agent_kl_nats(k)
            prior_compact = engine.compact(k, "prior")
            for combo in np.ndindex(*arr.shape):
                kl[agent_key(k, combo)] = float(arr[combo]) / LN2
                row = prior_compact[combo] if arr.shape else prior_compact
                from .tables import specialization as _spz

                spx[agent_key(k, combo)] = _spz(
                    ProbTable(np.asarray(row, dtype=float), (f"x{k}",))
                )
        diag = {
            "free_energy": fe_trace[-1],
            "expected_utility": engine.expected_utility(),
            "fe_trace": fe_trace,
            "node_fe_trace": node_fe,
            "sweeps": sweeps,
            "converged": converged,
            "restart": r,
            "seed": int(seed),
            "agent_kl_bits": kl,
            "agent_specialization": spx,
            "priors_optimized": engine.optimize_priors,
            "zero_mass_slices": {
                str(k): engine.f_zero_mass[k] for k in range(1, engine.nv)
            },
        }
        sol = _solution_from_engine(spec, engine, betas, rho, u_vals, u_axes, diag)
        if best is None or sol.free_energy > best.free_energy:
            best = sol
    return best


def fixed_point_residual(solution: Solution) -> float:
    """Max deviation of the stored posteriors from their own Boltzmann
    re-computation; small only at a genuine fixed point."""
    engine = _engine_from_tables(
        solution.spec,
        solution.utility,
        solution.utility_axes,
        solution.world_prior,
        solution.posteriors,
        solution.priors,
        solution.betas,
    )
    worst = 0.0
    for k in range(1, engine.nv):
        f = engine.effective_utility(k)
        old = engine.post[k].copy()
        engine.update_posterior(k, f)
        worst = max(worst, float(np.abs(engine.post[k] - old).max()))
        engine.post[k] = old
    return worst


def prior_consistency_residual(solution: Solution) -> float:
    """Max deviation between stored priors and the joint's conditional
    marginals (only meaningful when priors were optimized)."""
    engine = _engine_from_tables(
        solution.spec,
        solution.utility,
        solution.utility_axes,
        solution.world_prior,
        solution.posteriors,
        solution.priors,
        solution.betas,
    )
    worst = 0.0
    for k in range(1, engine.nv):
        old = engine.prior[k].copy()
        engine._prior_from_joint(k)
        deg = engine.prior_deg[k]
        diff = np.abs(engine.prior[k] - old)
        if np.any(deg):
            diff = np.where(deg, 0.0, diff)
        worst = max(worst, float(diff.max()))
        engine.prior[k] = old
    return worst


def report(solution: Solution) -> dict:
    """Human-facing summary: performance, information use, specialization."""
    return {
        "architecture": solution.spec.label(),
        "expected_utility": solution.expected_utility,
        "free_energy": solution.free_energy,
        "converged": solution.converged,
        "sweeps": solution.diagnostics["sweeps"],
        "processed_information_bits": dict(solution.diagnostics["agent_kl_bits"]),
        "specialization": dict(solution.diagnostics["agent_specialization"]),
    }


# ---------------------------------------------------------------- calibration


def _probe_kls(solution: Solution) -> dict:
    return solution.diagnostics["agent_kl_bits"]


def _capacity_bits(spec, k) -> float:
    return float(np.log2(spec.card(k)))


def _blocked_posteriors(spec, world_card, eps=0.05):
    """Coarse-graining start: each node copies its input variable down to
    its own cardinality by contiguous blocks, ignoring selectors.  Random
    starts practically never propose such division-of-labor codes, yet
    they are exactly the states the low-budget folds preserve."""
    cards = [world_card] + [nd.cardinality for nd in spec.nodes]
    posts = []
    for k, nd in enumerate(spec.nodes, start=1):
        c = nd.cardinality
        cond = sorted(set(nd.selectors) | set(nd.inputs))
        shape = [cards[i] for i in cond] + [c]
        vals = np.full(shape, eps / c)
        inputs = sorted(nd.inputs)
        if not inputs:
            vals[:] = 1.0 / c
        else:
            in_pos = [cond.index(i) for i in inputs]
            in_cards = [cards[i] for i in inputs]
            m = int(np.prod(in_cards))
            for flat in range(m):
                combo = np.unravel_index(flat, in_cards)
                sl = [slice(None)] * len(shape)
                for p, v in zip(in_pos, combo):
                    sl[p] = int(v)
                sl[-1] = flat * c // m
                vals[tuple(sl)] += 1.0 - eps
        axes = tuple(f"x{i}" for i in cond) + (f"x{k}",)
        posts.append(ProbTable(vals, axes, axes[:-1]))
    return posts


def calibrate_betas(
    spec,
    utility,
    world_prior,
    budgets_bits,
    epsilon=1e-8,
    probe_epsilon=1e-6,
    max_sweeps=2000,
    probe_sweeps=200,
    seed=0,
    max_passes=8,
    slack_bits=0.02,
    target_bits=0.01,
    strategy="bisection",
    samples=64,
    restarts=2,
    tries=1,
    initial_betas=None,
    initial_posteriors=None,
    final_epsilon=None,
    final_sweeps=None,
    _trace=None,
) -> Solution:
    """Find per-agent betas whose processed information meets the budgets.

    All betas start fully informative and descend together: every probe
    solves once at the current assignment, then each agent takes a damped
    multiplicative step on log(beta) toward its budget, bracketed so the
    iteration cannot oscillate.  The returned solution satisfies every
    budget within ``slack_bits``.  ``strategy="sampling"`` instead draws
    random beta combinations and keeps the feasible one with the best free
    energy.

    ``tries > 1`` repeats the whole procedure on shifted RNG streams with
    alternating anchor styles and returns the best attempt (feasibility
    first, then expected utility).  Single attempts land in a poor basin
    on some fraction of seeds; the attempts fail independently, so a small
    portfolio tightens the cross-seed spread at proportional cost.
    """
    roster = agent_roster(spec)
    if np.isscalar(budgets_bits):
        budgets = [float(budgets_bits)] * len(roster)
    else:
        budgets = [float(b) for b in budgets_bits]
    if len(budgets) < len(roster):
        raise ParameterError(
            f"{len(budgets)} budgets for {len(roster)} agents"
        )
    budgets = budgets[: len(roster)]
    if strategy == "sampling":
        return _calibrate_sampling(
            spec, utility, world_prior, budgets, epsilon, max_sweeps, seed, samples, slack_bits
        )
    if strategy != "bisection":
        raise ParameterError(f"unknown calibration strategy {strategy!r}")

    # start every budget-bounded agent at a beta matched to the utility
    # scale.  Far above it the posteriors are deterministic and the
    # response is a wall of cliffs; far below it everything collapses.
    # In between the responses are graded, the first race lands on an
    # informative solution, and the descent tracks budgets smoothly.  A
    # caller with a nearby solved condition passes its betas instead.
    u_arr = np.asarray(
        utility.values if hasattr(utility, "values") and not isinstance(utility, np.ndarray) else utility,
        dtype=float,
    )
    u_range = float(u_arr.max() - u_arr.min())
    anchor = float(np.clip(300.0 / max(u_range, 1e-9), 10.0, BETA_MAX))

    if tries > 1:
        # attempt schedule: alternate the uniform anchor with anchors
        # scaled to the budget profile (the two favor different partition
        # granularities), then repeat both on shifted RNG streams.  The
        # attempts fail independently, so the best of a few tightens the
        # cross-seed spread at proportional cost.  Feasibility first, then
        # expected utility, ranks the attempts.
        bmax = max((bb for bb in budgets if bb > 0.0), default=1.0)
        scaled_ib = [
            BETA_MAX
            if bb >= _capacity_bits(spec, a[0])
            else float(np.clip(anchor * bb / bmax, 10.0, BETA_MAX))
            for a, bb in zip(roster, budgets)
        ]
        best = None
        for t in range(tries):
            if initial_betas is not None:
                ib_t, seed_t = initial_betas, seed + 104729 * t
            else:
                ib_t = scaled_ib if t % 2 else None
                seed_t = seed + 104729 * (t // 2)
            s = calibrate_betas(
                spec,
                utility,
                world_prior,
                budgets_bits,
                epsilon=epsilon,
                probe_epsilon=probe_epsilon,
                max_sweeps=max_sweeps,
                probe_sweeps=probe_sweeps,
                seed=seed_t,
                max_passes=max_passes,
                slack_bits=slack_bits,
                target_bits=target_bits,
                strategy=strategy,
                samples=samples,
                restarts=restarts,
                tries=1,
                initial_betas=ib_t,
                initial_posteriors=initial_posteriors if t == 0 else None,
                final_epsilon=final_epsilon,
                final_sweeps=final_sweeps,
                _trace=_trace,
            )
            kls = s.diagnostics["agent_kl_bits"]
            feas = all(
                kls[agent_key(*a)] <= bb + slack_bits
                for a, bb in zip(roster, budgets)
            )
            if best is None or (feas, s.expected_utility) > best[:2]:
                best = (feas, s.expected_utility, s)
        return best[2]

    if final_epsilon is None:
        final_epsilon = epsilon
    if final_sweeps is None:
        final_sweeps = max_sweeps
    beta_by_agent = {}
    for i, ((k, combo), b) in enumerate(zip(roster, budgets)):
        if b <= 0.0:
            beta_by_agent[(k, combo)] = BETA_MIN
        elif initial_betas is not None:
            beta_by_agent[(k, combo)] = float(
                np.clip(initial_betas[i], BETA_MIN, BETA_MAX)
            )
        elif b >= _capacity_bits(spec, k):
            beta_by_agent[(k, combo)] = BETA_MAX
        else:
            beta_by_agent[(k, combo)] = anchor

    budget_by_agent = dict(zip(roster, budgets))
    state = {"sol": None}
    rho_arr = (
        world_prior.values
        if isinstance(world_prior, ProbTable)
        else np.asarray(world_prior)
    )
    joint_size = int(
        rho_arr.shape[0] * np.prod([nd.cardinality for nd in spec.nodes])
    )
    # probes on large systems get a tighter sweep cap; they only steer the
    # descent, the returned solution is re-solved tightly at the end
    probe_cap = max(60, min(probe_sweeps, int(2e6 // max(1, joint_size))))

    def overshoot(sol):
        kls = sol.diagnostics["agent_kl_bits"]
        return max(
            kls[agent_key(*a)] - budget_by_agent[a] for a in roster
        )

    def feasible(sol):
        return overshoot(sol) <= slack_bits

    def run(eps, sweeps_cap, rst, prefer_feasible=False, priors=None, race_seed=0):
        """One solve at the current betas; rst > 1 also races cold starts
        against the warm continuation.  The race favors free energy; with
        prefer_feasible a budget-respecting solution always beats one over
        budget, whatever its free energy."""
        key = (
            tuple(beta_by_agent[a] for a in roster),
            eps, sweeps_cap, rst, prefer_feasible,
            priors is not None, race_seed,
        )
        if state.get("key") == key and state["sol"] is not None:
            return state["sol"]
        t0 = time.time()
        # tight requests on big joints get a sweep cap; a state still
        # mid-flight after that many sweeps is not worth finishing here,
        # the one solution actually returned is re-polished at the end
        if sweeps_cap > probe_cap:
            sweeps_cap = min(
                sweeps_cap, max(400, int(4e7 // max(1, joint_size)))
            )
        betas = BetaAssignment.from_flat(
            spec,
            [beta_by_agent[a] for a in roster],
            budgets_bits=budgets,
        )
        warm = None
        if state["sol"] is not None:
            warm = state["sol"].posteriors
        sol = None
        if warm is not None:
            sol = solve(
                spec, utility, world_prior, betas,
                epsilon=eps, max_sweeps=sweeps_cap, seed=seed,
                init_posteriors=warm, init_noise=1e-4,
                fixed_priors=priors,
            )
        if warm is None or rst > 1:
            # cold candidates stay at probe cost; only a winner gets the
            # requested tightness
            cold = solve(
                spec, utility, world_prior, betas,
                epsilon=probe_epsilon, max_sweeps=probe_cap,
                seed=seed + 7919 * race_seed,
                restarts=max(1, rst),
                fixed_priors=priors,
            )
            if sol is None:
                take = True
            else:
                take = cold.free_energy > sol.free_energy
                if prefer_feasible:
                    if feasible(cold) != feasible(sol):
                        take = feasible(cold)
                    elif not feasible(cold):
                        take = overshoot(cold) < overshoot(sol)
            if take:
                if eps < probe_epsilon or sweeps_cap > probe_cap:
                    polished = solve(
                        spec, utility, world_prior, betas,
                        epsilon=eps, max_sweeps=sweeps_cap, seed=seed,
                        init_posteriors=cold.posteriors, init_noise=0.0,
                        fixed_priors=priors,
                    )
                    # a probe-quality winner can read feasible and then
                    # drift over budget under the tight solve; a feasible
                    # warm incumbent beats such a pretender
                    if (
                        prefer_feasible
                        and sol is not None
                        and feasible(sol)
                        and not feasible(polished)
                    ):
                        polished = sol
                    cold = polished
                sol = cold
        state["sol"] = sol
        state["key"] = key
        if _trace is not None:
            _trace.append({
                "betas": {agent_key(*a): beta_by_agent[a] for a in roster},
                "kls": dict(sol.diagnostics["agent_kl_bits"]),
                "fe": sol.free_energy,
                "eu": sol.expected_utility,
                "rst": rst,
                "fixed": priors is not None,
                "phase": state.get("phase", "?"),
                "dt": time.time() - t0,
            })
        return sol

    unpinned = [
        a
        for (i, a) in enumerate(roster)
        if 0.0 < budget_by_agent[a]
        and (
            budget_by_agent[a] < _capacity_bits(spec, a[0])
            or (initial_betas is not None and initial_betas[i] < BETA_MAX)
        )
    ]
    # anchor: race restarts until every budgeted agent processes some
    # information, retrying hotter if a branch stays collapsed.  The
    # anchor's priors then stay frozen through the whole descent.  With
    # the prior update live, nothing stops the posterior-equals-prior
    # fixed point from swallowing agents one by one as betas move (the
    # prior follows the posterior into a single action, after which the
    # divergence reads zero at any beta and the probe signal is gone).
    # Against frozen spread-out priors each divergence is a smooth
    # increasing function of the agent's own beta, which a bracketed
    # search can actually track.
    def informative_or_dead(sol_, a):
        # a selector branch nothing upstream ever routes into carries no
        # mass; its divergence is zero by construction, not by collapse
        if _probe_kls(sol_)[agent_key(*a)] >= 0.02:
            return True
        k, combo = a
        sel = list(spec.nodes[k - 1].selectors)
        other = tuple(i for i in range(sol_.joint.values.ndim) if i not in sel)
        idx = tuple(combo[sel.index(s)] for s in sorted(sel))
        return float(sol_.joint.values.sum(axis=other)[idx]) < 1e-9

    seed_posts = initial_posteriors
    if seed_posts is None:
        # without a caller-provided start, enter a deterministic
        # coarse-graining candidate; the anchor race decides its fate
        seed_posts = _blocked_posteriors(spec, rho_arr.shape[0])
    if seed_posts is not None:
        # a caller handing over a solved neighbor seeds the chain with its
        # posteriors, not just its betas; betas alone lose the basin
        state["sol"] = solve(
            spec, utility, world_prior,
            BetaAssignment.from_flat(
                spec,
                [beta_by_agent[a] for a in roster],
                budgets_bits=budgets,
            ),
            epsilon=probe_epsilon, max_sweeps=probe_cap, seed=seed,
            init_posteriors=seed_posts, init_noise=0.0,
        )

    state["phase"] = "anchor"
    anchor_rst = max(2, restarts) if initial_betas is not None else max(8, restarts)
    sol = run(probe_epsilon, probe_cap, anchor_rst)
    best = (-1, -1, -np.inf, None, None)
    for attempt in range(4):
        if attempt:
            heated = False
            for a in unpinned:
                if informative_or_dead(sol, a):
                    continue
                nb = min(BETA_MAX, beta_by_agent[a] * 10.0)
                heated = heated or nb > beta_by_agent[a]
                beta_by_agent[a] = nb
            if not heated:
                break
            sol = run(probe_epsilon, probe_cap, 4, race_seed=attempt)
        kls_now = _probe_kls(sol)
        n_strict = sum(kls_now[agent_key(*a)] >= 0.02 for a in unpinned)
        n_inf = sum(informative_or_dead(sol, a) for a in unpinned)
        if (n_inf, n_strict, sol.free_energy) > best[:3]:
            best = (n_inf, n_strict, sol.free_energy, sol, dict(beta_by_agent))
        if n_inf == len(unpinned):
            break
    sol, anchor_betas = best[3], best[4]
    beta_by_agent.update(anchor_betas)
    state["sol"] = sol
    state["key"] = None
    # blend a uniform floor into the frozen priors.  A branch that sat
    # collapsed in the anchor leaves a near-delta prior; against that the
    # divergence reads tens of bits and stops responding to beta.  The
    # floor caps the reading at a few bits and keeps it steerable; the
    # final solutions use live priors, so the blend costs nothing.
    frozen = []
    for pt in sol.priors:
        u = 1.0 / pt.values.shape[-1]
        frozen.append(
            ProbTable(0.99 * pt.values + 0.01 * u, pt.axes, pt.conditioned)
        )

    # descent: all agents move together, one probe per iteration: a
    # damped multiplicative step on each beta toward its budget, kept
    # inside its bracket.  Staying on the same side of the budget grows
    # the step (the response can be flat for decades of beta), flipping
    # sides resets it.
    def descend(fixed, max_probes_, tag=0):
        state["phase"] = f"descend{tag}"
        sol_ = state["sol"]
        lnlo = {a: np.log(BETA_MIN) for a in unpinned}
        lnhi = {a: np.log(BETA_MAX) for a in unpinned}
        side = {a: 0 for a in unpinned}
        boost = {a: 1.0 for a in unpinned}
        for it in range(max_probes_):
            kls = _probe_kls(sol_)
            moved = False
            for a in unpinned:
                b = budget_by_agent[a]
                got = kls[agent_key(*a)]
                db = max(target_bits, 0.06 * b)
                ln_b = np.log(beta_by_agent[a])
                if got > b + db:
                    lnhi[a] = min(lnhi[a], ln_b)
                    new_side = 1
                elif got < b - db and beta_by_agent[a] < BETA_MAX:
                    lnlo[a] = max(lnlo[a], ln_b)
                    new_side = -1
                else:
                    side[a], boost[a] = 0, 1.0
                    continue
                boost[a] = min(3.0, boost[a] * 1.6) if new_side == side[a] else 1.0
                side[a] = new_side
                if lnhi[a] - lnlo[a] < 1e-3:
                    if new_side == 1:
                        beta_by_agent[a] = float(np.exp(lnlo[a]))
                        moved = True
                    continue
                step = 0.7 * boost[a] * np.log((b + 1e-6) / (got + 1e-6))
                cand = ln_b + float(np.clip(step, -4.0, 4.0))
                if not (lnlo[a] < cand < lnhi[a]):
                    cand = 0.5 * (lnlo[a] + lnhi[a])
                beta_by_agent[a] = float(np.exp(cand))
                moved = True
            if not moved:
                break
            sol_ = run(probe_epsilon, probe_cap, 1, priors=fixed, race_seed=tag)
        return sol_

    sol = descend(frozen, max(15, 4 * max_passes))
    descent_snap = (dict(beta_by_agent), state["sol"])

    # endgame, on the released model.  Everything funnels through a
    # register holding the best tightly-solved feasible state seen; the
    # register is what gets returned, so no amount of failed exploration
    # can make the answer worse than the first feasible solution found.
    best_feas = [None]
    least_over = [None]

    def consider(s):
        if overshoot(s) <= slack_bits:
            if best_feas[0] is None or s.free_energy > best_feas[0][1].free_energy:
                best_feas[0] = (dict(beta_by_agent), s)
        if least_over[0] is None or overshoot(s) < overshoot(least_over[0][1]):
            least_over[0] = (dict(beta_by_agent), s)

    def restore(snap):
        beta_by_agent.clear()
        beta_by_agent.update(snap[0])
        state["sol"], state["key"] = snap[1], None

    def cool(sol, rounds=25):
        # shrink overshooters at probe cost; pay for tightness only when
        # the probe reads feasible
        raced = False
        for i in range(rounds):
            kls = _probe_kls(sol)
            bad = [
                a
                for a in roster
                if kls[agent_key(*a)] > budget_by_agent[a] + slack_bits
            ]
            if not bad:
                sol = run(final_epsilon, final_sweeps, 1)
                consider(sol)
                if overshoot(sol) <= slack_bits:
                    return sol
                continue
            power = 0.8 + 0.2 * i
            for a in bad:
                got = kls[agent_key(*a)]
                b = budget_by_agent[a]
                factor = ((b + 0.25 * slack_bits + 1e-6) / (got + 1e-6)) ** power
                # bounded shrink; one leap across a fold collapses the
                # whole chain and the warm continuation cannot climb back
                factor = min(0.9, max(0.25, factor))
                beta_by_agent[a] = max(BETA_MIN, beta_by_agent[a] * factor)
            sol = run(probe_epsilon, probe_cap, 1)
            if not raced:
                dead = [
                    a
                    for a in bad
                    if _probe_kls(sol)[agent_key(*a)]
                    < 0.5 * budget_by_agent[a]
                ]
                if dead:
                    # warm continuation fell through a fold instead of
                    # landing at budget: the over-budget partition has no
                    # branch at this rate, but a coarser one might.  Cold
                    # inits at the mid-cool betas can still converge to
                    # feasible states, unlike colds at the endpoint betas.
                    raced = True
                    sol = run(
                        probe_epsilon,
                        probe_cap,
                        4,
                        prefer_feasible=True,
                        race_seed=41 + i,
                    )
        return sol

    # release the priors in stages: re-derive each agent's optimal prior
    # from the current joint, blend toward it, re-solve tightly, repeat
    # with less damping.  Dropped straight to live updates the prior
    # chases a transient posterior into the one-action fixed point; the
    # damped chain sharpens the anchor partition instead.
    state["phase"] = "stages"
    cur = frozen
    for si, w in enumerate((0.5, 0.2, 0.0)):
        tgt = [
            update_prior(spec, state["sol"].joint, nd.index)
            for nd in spec.nodes
        ]
        cur = [
            ProbTable(
                w * c.values + (1.0 - w) * t.values, c.axes, c.conditioned
            )
            for c, t in zip(cur, tgt)
        ]
        run(final_epsilon, final_sweeps, 1, priors=cur, race_seed=17 + si)
    staged_snap = (dict(beta_by_agent), state["sol"])

    state["phase"] = "race1"
    # fully live tight restart race at the descended betas
    sol = run(final_epsilon, final_sweeps, 6, prefer_feasible=True)
    consider(sol)
    if overshoot(sol) > slack_bits and (
        best_feas[0] is None
        or sol.free_energy > best_feas[0][1].free_energy
    ):
        cool(sol)

    state["phase"] = "paths"
    # the staged candidate itself, then two independent ways down when it
    # overshoots, each registering whatever feasible states it crosses:
    # cool the structured state directly, and separately re-descend the
    # betas on the sharpened-prior curve (which buys more divergence per
    # beta than the anchor-frozen curve the betas were tuned on)
    restore(staged_snap)
    s_live = run(final_epsilon, final_sweeps, 1)
    consider(s_live)
    if overshoot(s_live) > slack_bits:
        live_snap = (dict(beta_by_agent), s_live)
        if (
            best_feas[0] is None
            or s_live.free_energy > best_feas[0][1].free_energy
        ):
            cool(s_live, rounds=10)
            restore(live_snap)
        tgt = [
            update_prior(spec, state["sol"].joint, nd.index)
            for nd in spec.nodes
        ]
        frozen2 = [
            ProbTable(
                0.99 * t.values + 0.01 / t.values.shape[-1],
                t.axes,
                t.conditioned,
            )
            for t in tgt
        ]
        descend(frozen2, max(12, 2 * max_passes), tag=1)
        descent_snap = (dict(beta_by_agent), state["sol"])
        s_live = run(final_epsilon, final_sweeps, 1, race_seed=23)
        consider(s_live)
        if overshoot(s_live) > slack_bits:
            cool(s_live, rounds=10)

    # agents the release dropped to near zero sat at budget against the
    # frozen priors, so their informative branch lives at a somewhat
    # higher beta under live priors.  Chain from the descent endpoint
    # with those betas raised, then cool back down the same branch.
    state["phase"] = "ladder"
    released = _probe_kls(state["sol"])
    weak = [
        a
        for a in unpinned
        if released[agent_key(*a)] < 0.5 * budget_by_agent[a]
    ]
    for factor in (2.0, 4.0):
        if not weak:
            break
        reg_before = None if best_feas[0] is None else best_feas[0][1].free_energy
        restore(descent_snap)
        for a in weak:
            beta_by_agent[a] = min(BETA_MAX, beta_by_agent[a] * factor)
        s = run(final_epsilon, final_sweeps, 1)
        consider(s)
        if overshoot(s) > slack_bits and (
            best_feas[0] is None
            or s.free_energy > best_feas[0][1].free_energy
        ):
            s = cool(s, rounds=8)
        if best_feas[0] is not None and overshoot(s) <= slack_bits:
            break
        reg_after = None if best_feas[0] is None else best_feas[0][1].free_energy
        if reg_after == reg_before:
            # the raised betas fell back to the same place; a bigger raise
            # lands further up the same dead branch
            break

    # bounded exploration from the register: raise the betas of agents
    # sitting far under budget.  A pop past a budget at probe cost just
    # halves that agent's step and costs one cheap solve; only probes
    # that stay feasible earn a tight solve and a shot at the register.
    state["phase"] = "nudge"
    if best_feas[0] is not None:
        nudge_scale = {a: 1.0 for a in unpinned}
        stalls = 0
        for i in range(10):
            base_betas, base_sol = best_feas[0]
            kls = base_sol.diagnostics["agent_kl_bits"]
            low = [
                a
                for a in unpinned
                if kls[agent_key(*a)]
                < budget_by_agent[a] - max(target_bits, 0.25 * budget_by_agent[a])
                and base_betas[a] < BETA_MAX
                and nudge_scale[a] >= 0.2
            ]
            if not low:
                break
            restore(best_feas[0])
            for a in low:
                got = kls[agent_key(*a)]
                b = budget_by_agent[a]
                step = nudge_scale[a] * min(
                    1.0, 0.5 * np.log((b + 1e-6) / (got + 1e-6))
                )
                beta_by_agent[a] = min(
                    BETA_MAX, beta_by_agent[a] * float(np.exp(step))
                )
            probe = run(probe_epsilon, probe_cap, 1)
            if overshoot(probe) > 0.5 * slack_bits:
                pk = probe.diagnostics["agent_kl_bits"]
                popped = [
                    a
                    for a in low
                    if pk[agent_key(*a)] > budget_by_agent[a] + 0.5 * slack_bits
                ]
                for a in popped or low:
                    nudge_scale[a] *= 0.5
                continue
            tight = run(final_epsilon, final_sweeps, 1)
            consider(tight)
            if best_feas[0][1] is tight:
                stalls = 0
            else:
                # paying for tight solves that never move the register is
                # the slowest way to confirm the basin is exhausted
                stalls += 1
                if stalls >= 2:
                    break
            if overshoot(tight) > slack_bits:
                for a in low:
                    nudge_scale[a] *= 0.5

    state["phase"] = "final"
    # a few fresh restart races at the settled betas; the register keeps
    # whatever basin scores best while staying feasible
    for rr in range(3):
        reg_before = None if best_feas[0] is None else best_feas[0][1].free_energy
        if best_feas[0] is not None:
            restore(best_feas[0])
        s = run(
            final_epsilon, final_sweeps, 3,
            prefer_feasible=True, race_seed=11 + rr,
        )
        consider(s)
        if overshoot(s) > slack_bits and (
            best_feas[0] is None
            or s.free_energy > best_feas[0][1].free_energy
        ):
            # a better basin that sits over budget is worth cooling into
            # range rather than discarding; the register still only
            # admits solutions that verify feasible
            cool(s, rounds=10)
        reg_after = None if best_feas[0] is None else best_feas[0][1].free_energy
        if rr > 0 and reg_after == reg_before:
            break

    if best_feas[0] is not None:
        restore(best_feas[0])
        chosen = best_feas[0][1]
    else:
        # nothing ever landed feasible (budgets at odds with slack and the
        # response shape); hand back the closest miss rather than raising
        restore(least_over[0])
        chosen = least_over[0][1]
    if not chosen.converged:
        refined = solve(
            spec, utility, world_prior, chosen.betas,
            epsilon=final_epsilon, max_sweeps=final_sweeps, seed=seed,
            init_posteriors=chosen.posteriors, init_noise=0.0,
        )
        if feasible(refined) or overshoot(refined) <= overshoot(chosen):
            chosen = refined
    return chosen


def _calibrate_sampling(
    spec, utility, world_prior, budgets, epsilon, max_sweeps, seed, samples, slack_bits
):
    """Random search in log-beta space; keeps the feasible argmax by FE."""
    roster = agent_roster(spec)
    rng = np.random.default_rng(int(seed))
    lo, hi = np.log(1e-2 * LN2), np.log(1e3 * LN2)
    best = None
    for s in range(samples):
        flat = np.exp(rng.uniform(lo, hi, size=len(roster)))
        betas = BetaAssignment.from_flat(spec, flat, budgets_bits=budgets)
        sol = solve(
            spec,
            utility,
            world_prior,
            betas,
            epsilon=epsilon,
            max_sweeps=max_sweeps,
            restarts=1,
            seed=int(rng.integers(2**31)),
        )
        kls = sol.diagnostics["agent_kl_bits"]
        feasible = all(
            kls[agent_key(*a)] <= b + slack_bits for a, b in zip(roster, budgets)
        )
        if feasible and (best is None or sol.free_energy > best.free_energy):
            best = sol
    if best is None:
        betas = BetaAssignment.from_flat(spec, [BETA_MIN] * len(roster), budgets_bits=budgets)
        best = solve(
            spec, utility, world_prior, betas,
            epsilon=epsilon, max_sweeps=max_sweeps, restarts=1, seed=seed,
        )
    return best


# -------------------------------------------------------------- serialization


def solution_to_jsonable(sol: Solution) -> dict:
    def table(t: ProbTable):
        out = {
            "axes": list(t.axes),
            "conditioned": list(t.conditioned),
            "values": t.values.tolist(),
        }
        if t.degenerate is not None:
            out["degenerate"] = t.degenerate.tolist()
        return out

    return {
        "architecture": sol.spec.label(),
        "nodes": [
            {
                "k": nd.index,
                "sel": list(nd.selectors),
                "in": list(nd.inputs),
                "card": nd.cardinality,
            }
            for nd in sol.spec.nodes
        ],
        "posteriors": [table(t) for t in sol.posteriors],
        "priors": [table(t) for t in sol.priors],
        "joint": table(sol.joint),
        "world_prior": table(sol.world_prior),
        "utility": sol.utility.tolist(),
        "utility_axes": list(sol.utility_axes),
        "betas": {str(k): v.tolist() for k, v in sol.betas.node_betas.items()},
        "budgets_bits": None
        if sol.betas.budgets_bits is None
        else {str(k): v.tolist() for k, v in sol.betas.budgets_bits.items()},
        "diagnostics": {
            key: val
            for key, val in sol.diagnostics.items()
            if key != "node_fe_trace"
        },
        "log_normalizers": [np.asarray(z).tolist() for z in sol.log_normalizers],
    }


def solution_from_jsonable(data: dict) -> Solution:
    from .architecture import spec_from_label

    def table(d):
        return ProbTable(
            np.asarray(d["values"], dtype=float),
            tuple(d["axes"]),
            tuple(d["conditioned"]),
            degenerate=np.asarray(d["degenerate"], dtype=bool)
            if "degenerate" in d
            else None,
        )

    nodes = tuple(
        NodeSpec(n["k"], tuple(n["sel"]), tuple(n["in"]), n["card"])
        for n in data["nodes"]
    )
    ty, _ = parse_label(data["architecture"])
    spec = ArchitectureSpec(nodes, ty)
    betas = BetaAssignment(
        {int(k): np.asarray(v, dtype=float) for k, v in data["betas"].items()},
        None
        if data.get("budgets_bits") is None
        else {
            int(k): np.asarray(v, dtype=float)
            for k, v in data["budgets_bits"].items()
        },
    )
    return Solution(
        spec=spec,
        posteriors=[table(t) for t in data["posteriors"]],
        priors=[table(t) for t in data["priors"]],
        joint=table(data["joint"]),
        betas=betas,
        world_prior=table(data["world_prior"]),
        utility=np.asarray(data["utility"], dtype=float),
        utility_axes=tuple(data["utility_axes"]),
        diagnostics=dict(data["diagnostics"]),
        log_normalizers=[np.asarray(z, dtype=float) for z in data["log_normalizers"]],
    )


def save_solution(sol: Solution, path) -> None:
    with open(path, "w") as fh:
        json.dump(solution_to_jsonable(sol), fh)


def load_solution(path) -> Solution:
    with open(path) as fh:
        return solution_from_jsonable(json.load(fh))
