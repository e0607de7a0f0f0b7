"""Feed-forward decision architectures and their enumeration.

An architecture is a chain of decision nodes 1..N over a world variable
(index 0).  Each node k declares selector variables (they pick which prior,
and therefore which agent, is active at the node) and input variables (they
condition the node's posterior but not its prior).  Node 1 always processes
the world state directly.  Agents are (node, selector-assignment) pairs, so a
node with selector cardinalities c_1..c_j hosts prod(c_i) agents.

Enumeration covers depths 1 to 3.  Wiring combinations that are redundant
re-drawings of a smaller system (an extra non-selector input whose own
sources are already visible, or a relabeling of interchangeable intermediate
variables) are pruned by generic rules; the catalog tests pin the expected
survivors explicitly.
"""

import ast
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    MissingSolutionError,
    ParameterError,
    UnsupportedDepthError,
    WiringError,
)
from .tables import ProbTable, specialization


@dataclass(frozen=True)
class NodeSpec:
    """One decision node: selectors gate the prior, inputs feed the posterior."""

    index: int
    selectors: tuple
    inputs: tuple
    cardinality: int

    def __post_init__(self):
        object.__setattr__(self, "selectors", tuple(self.selectors))
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class ArchitectureSpec:
    """A full wiring: ordered nodes plus the taxonomy label they came from."""

    nodes: tuple
    type_label: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "type_label", tuple(self.type_label))

    @property
    def depth(self) -> int:
        return len(self.nodes)

    def node(self, k: int) -> NodeSpec:
        return self.nodes[k - 1]

    def card(self, k: int) -> int:
        if k == 0:
            raise WiringError("world cardinality is not part of the architecture")
        return self.node(k).cardinality

    def agent_counts(self) -> list:
        counts = []
        for nd in self.nodes:
            c = 1
            for s in nd.selectors:
                c *= self.card(s)
            counts.append(c)
        return counts

    @property
    def total_agents(self) -> int:
        return sum(self.agent_counts())

    def shape(self) -> list:
        """Agent structure per node: 1, a selector cardinality, or a tuple."""
        out = []
        for nd in self.nodes:
            if not nd.selectors:
                out.append(1)
            elif len(nd.selectors) == 1:
                out.append(self.card(nd.selectors[0]))
            else:
                out.append(tuple(self.card(s) for s in nd.selectors))
        return out

    def label(self) -> str:
        return format_label(self.type_label, self.shape())


def format_label(type_label, shape) -> str:
    ty = "(" + ",".join(str(i) for i in type_label) + ("," if len(type_label) == 1 else "") + ")"
    parts = []
    for e in shape:
        if isinstance(e, tuple):
            parts.append("(" + ",".join(str(c) for c in e) + ")")
        else:
            parts.append(str(e))
    return ty + "[" + ",".join(parts) + "]"


def parse_label(label: str):
    """Parse "(1,4)[1,3,(3,2)]" (an optional underscore before "[" is fine)."""
    text = label.strip().replace("_[", "[")
    cut = text.find("[")
    if cut < 0 or not text.endswith("]"):
        raise ParameterError(f"malformed architecture label: {label!r}")
    try:
        ty = ast.literal_eval(text[:cut])
        shape = ast.literal_eval("(" + text[cut + 1 : -1] + ",)")
    except (SyntaxError, ValueError) as exc:
        raise ParameterError(f"malformed architecture label: {label!r}") from exc
    if not isinstance(ty, tuple):
        ty = (ty,)
    return tuple(ty), list(shape)


# wiring tables for the taxonomy: (selectors, inputs) per position
_DEPTH2_CHOICES = {
    0: ((), (1,)),
    1: ((1,), (0,)),
    2: ((), (0, 1)),
}
_DEPTH3_MIDDLE = {
    0: ((), (1,)),
    1: ((1,), (0,)),
    2: ((), (0,)),
}
_DEPTH3_LAST = {
    0: ((), (2,)),
    1: ((), (1, 2)),
    2: ((1,), (2,)),
    3: ((2,), (1,)),
    4: ((1, 2), (0,)),
    5: ((2,), (0,)),
}


def _wirings_for_type(type_label):
    """Selector/input pairs for nodes 1..N of a taxonomy type."""
    first = ((), (0,))
    if type_label == (-1,):
        return [first]
    if len(type_label) == 1:
        i = type_label[0]
        if i not in _DEPTH2_CHOICES:
            raise ParameterError(f"unknown two-step type {type_label}")
        return [first, _DEPTH2_CHOICES[i]]
    if len(type_label) == 2:
        i, j = type_label
        if i not in _DEPTH3_MIDDLE or j not in _DEPTH3_LAST:
            raise ParameterError(f"unknown three-step type {type_label}")
        return [first, _DEPTH3_MIDDLE[i], _DEPTH3_LAST[j]]
    raise UnsupportedDepthError("types beyond depth 3 are not catalogued")


def _all_used_downstream(wirings) -> bool:
    n = len(wirings)
    for m in range(1, n):  # intermediate node indices 1..N-1
        used = any(
            m in wirings[k][0] or m in wirings[k][1] for k in range(m, n)
        )
        if not used:
            return False
    return True


def _has_redundant_input(wirings) -> bool:
    """An input m of node k is redundant when m has no selectors and
    everything m itself sees is already among k's other inputs."""
    for k, (sel_k, in_k) in enumerate(wirings):
        for m in in_k:
            if m == 0:
                continue
            sel_m, in_m = wirings[m - 1]
            if not sel_m and set(in_m) <= set(in_k) - {m}:
                return True
    return False


def _canonical_wiring(wirings):
    """Smallest relabeling of intermediate variables that stays feed-forward."""
    n = len(wirings)
    best = None
    for perm in itertools.permutations(range(1, n)):
        mapping = {0: 0}
        for old, new in zip(range(1, n), perm):
            mapping[old] = new
        mapping[n] = n
        relabeled = [None] * n
        ok = True
        for k, (sel, in_) in enumerate(wirings):
            new_k = mapping[k + 1]
            new_sel = tuple(sorted(mapping[v] for v in sel))
            new_in = tuple(sorted(mapping[v] for v in in_))
            if any(v >= new_k for v in new_sel + new_in if v != 0):
                ok = False
                break
            relabeled[new_k - 1] = (new_sel, new_in)
        if not ok or relabeled[0] != ((), (0,)):
            continue
        key = tuple(relabeled)
        if best is None or key < best:
            best = key
    return best if best is not None else tuple(wirings)


def _catalog_types(max_depth: int):
    if max_depth < 1:
        raise ParameterError("max_depth must be at least 1")
    if max_depth > 3:
        raise UnsupportedDepthError("enumeration supports depth 3 at most")
    types = [(-1,)]
    seen = set()
    if max_depth >= 2:
        for i in sorted(_DEPTH2_CHOICES):
            wirings = _wirings_for_type((i,))
            if not _all_used_downstream(wirings) or _has_redundant_input(wirings):
                continue
            key = _canonical_wiring(wirings)
            if key in seen:
                continue
            seen.add(key)
            types.append((i,))
    if max_depth >= 3:
        for i in sorted(_DEPTH3_MIDDLE):
            for j in sorted(_DEPTH3_LAST):
                wirings = _wirings_for_type((i, j))
                if not _all_used_downstream(wirings) or _has_redundant_input(wirings):
                    continue
                key = _canonical_wiring(wirings)
                if key in seen:
                    continue
                seen.add(key)
                types.append((i, j))
    return types


def _selector_nodes(wirings):
    sel = set()
    for s, _ in wirings:
        sel.update(s)
    sel.discard(0)
    return sorted(sel)


def _total_agents(wirings, cards):
    total = 0
    for sel, _ in wirings:
        c = 1
        for s in sel:
            c *= cards[s]
        total += c
    return total


def _shapes_for_type(type_label, n_agents, hidden_card):
    """Maximal selector-cardinality assignments fitting the agent budget.

    Every selector variable needs at least two values.  An assignment is kept
    when no single selector cardinality can be raised without exceeding the
    budget, which reproduces the fullest systems the budget allows.
    """
    wirings = _wirings_for_type(type_label)
    n = len(wirings)
    sel_nodes = _selector_nodes(wirings)

    def cards_from(assign):
        cards = {k: hidden_card for k in range(1, n + 1)}
        cards.update(assign)
        return cards

    if not sel_nodes:
        if _total_agents(wirings, cards_from({})) <= n_agents:
            return [{}]
        return []
    out = []
    for combo in itertools.product(
        range(2, n_agents + 1), repeat=len(sel_nodes)
    ):
        assign = dict(zip(sel_nodes, combo))
        cards = cards_from(assign)
        if _total_agents(wirings, cards) > n_agents:
            continue
        maximal = True
        for s in sel_nodes:
            bumped = dict(assign)
            bumped[s] += 1
            if _total_agents(wirings, cards_from(bumped)) <= n_agents:
                maximal = False
                break
        if maximal:
            out.append(assign)
    out.sort(key=lambda a: tuple(a[s] for s in sel_nodes))
    return out


def _build_spec(type_label, sel_cards, hidden_card):
    wirings = _wirings_for_type(type_label)
    nodes = []
    for k, (sel, in_) in enumerate(wirings, start=1):
        card = sel_cards.get(k, hidden_card)
        nodes.append(NodeSpec(k, sel, in_, card))
    return ArchitectureSpec(tuple(nodes), type_label)


def enumerate_architectures(max_depth=3, n_agents=10, hidden_card=20):
    """Catalog of architectures up to ``max_depth`` for a given agent budget.

    Non-selector variables (including the final action) get ``hidden_card``
    values; selector variables get the cardinalities of the maximal shapes.
    """
    if n_agents < 1:
        raise ParameterError("need at least one agent")
    if hidden_card < 2:
        raise ParameterError("hidden cardinality must be at least 2")
    catalog = []
    for ty in _catalog_types(max_depth):
        for assign in _shapes_for_type(ty, n_agents, hidden_card):
            catalog.append(_build_spec(ty, assign, hidden_card))
    return catalog


def spec_from_label(label: str, hidden_card=20) -> ArchitectureSpec:
    """Materialize an architecture from its label, e.g. "(1,5)[1,3,6]"."""
    ty, shape = parse_label(label)
    wirings = _wirings_for_type(ty)
    if len(shape) != len(wirings):
        raise WiringError(f"shape {shape} has {len(shape)} entries for depth {len(wirings)}")
    sel_cards = {}

    def pin(node_idx, card):
        if card < 2:
            raise WiringError(f"selector variable x{node_idx} needs cardinality >= 2")
        if sel_cards.setdefault(node_idx, card) != card:
            raise WiringError(
                f"conflicting cardinalities for selector variable x{node_idx}"
            )

    for k, (sel, _) in enumerate(wirings, start=1):
        entry = shape[k - 1]
        if not sel:
            if entry != 1:
                raise WiringError(f"node {k} has no selectors, shape entry must be 1")
        elif len(sel) == 1:
            if isinstance(entry, tuple):
                raise WiringError(f"node {k} has one selector, got tuple entry {entry}")
            pin(sel[0], int(entry))
        else:
            if not isinstance(entry, tuple) or len(entry) != len(sel):
                raise WiringError(f"node {k} needs a {len(sel)}-tuple entry, got {entry}")
            for s, c in zip(sel, entry):
                pin(s, int(c))
    return _build_spec(ty, sel_cards, hidden_card)


def validate_architecture(spec: ArchitectureSpec) -> list:
    """Structural checks; returns a list of violation strings (empty = ok)."""
    issues = []
    nodes = spec.nodes
    for pos, nd in enumerate(nodes, start=1):
        if nd.index != pos:
            issues.append(f"node at position {pos} carries index {nd.index}")
        refs = nd.selectors + nd.inputs
        for v in refs:
            if not 0 <= v < pos:
                issues.append(
                    f"node {pos} references x{v}, which is not an earlier variable"
                )
        if set(nd.selectors) & set(nd.inputs):
            issues.append(f"node {pos} lists a variable as both selector and input")
        if not nd.inputs and not nd.selectors:
            issues.append(f"node {pos} has neither selectors nor inputs")
        if nd.cardinality < 2:
            issues.append(f"node {pos} has cardinality {nd.cardinality}")
    if nodes:
        if nodes[0].selectors != () or nodes[0].inputs != (0,):
            issues.append("node 1 must process the world state directly")
    n = len(nodes)
    for m in range(1, n):  # every intermediate variable must be consumed
        used = any(
            m in nodes[k].selectors or m in nodes[k].inputs for k in range(m, n)
        )
        if not used:
            issues.append(f"intermediate variable x{m} is never used downstream")
    return issues


def agent_roster(spec: ArchitectureSpec) -> list:
    """All (node index, selector assignment) pairs in topological order."""
    roster = []
    for nd in spec.nodes:
        cards = [spec.card(s) for s in nd.selectors]
        for combo in itertools.product(*[range(c) for c in cards]):
            roster.append((nd.index, combo))
    return roster


@dataclass(frozen=True)
class FeatureVector:
    """Structural descriptors plus one solution-dependent summary."""

    average_operational_specialization: float
    hierarchical: bool
    agents_with_w_access: int
    operational_agents_with_w_access: int
    w_bottlenecks: int
    choice_per_agent_ratio: float


def hierarchical_shape(counts) -> bool:
    """Non-decreasing agent counts where every plateau is eventually exceeded."""
    if len(counts) < 2:
        return False
    for k in range(len(counts) - 1):
        if counts[k + 1] < counts[k]:
            return False
        if counts[k + 1] == counts[k] and not any(
            c > counts[k] for c in counts[k + 1 :]
        ):
            return False
    return True


def strictly_hierarchical_shape(counts) -> bool:
    return len(counts) >= 2 and all(
        counts[k] < counts[k + 1] for k in range(len(counts) - 1)
    )


def _sees_world(node: NodeSpec) -> bool:
    return 0 in node.selectors or 0 in node.inputs


def choice_per_agent_ratio(spec: ArchitectureSpec) -> float:
    """Average number of options introduced per agent.

    Each coordination stage contributes the number of options its selection
    opens up: a single selector contributes its cardinality, independent
    parallel selectors contribute the sum of theirs, and a selector chain
    that is reused across stages coordinates whole agent slots, contributing
    the slot count.  The final node contributes its action count.
    """
    total = spec.node(spec.depth).cardinality
    sel_usage = {}
    for nd in spec.nodes:
        for s in nd.selectors:
            sel_usage[s] = sel_usage.get(s, 0) + 1
    for nd in spec.nodes:
        if not nd.selectors:
            continue
        cards = [spec.card(s) for s in nd.selectors]
        if len(cards) == 1:
            total += cards[0]
        elif any(sel_usage[s] > 1 for s in nd.selectors):
            total += int(np.prod(cards))
        else:
            total += sum(cards)
    return total / spec.total_agents


def structural_features(spec: ArchitectureSpec) -> FeatureVector:
    counts = spec.agent_counts()
    w_access = sum(
        c for c, nd in zip(counts, spec.nodes) if _sees_world(nd)
    )
    last = spec.nodes[-1]
    return FeatureVector(
        average_operational_specialization=float("nan"),
        hierarchical=hierarchical_shape(counts),
        agents_with_w_access=w_access,
        operational_agents_with_w_access=counts[-1] if _sees_world(last) else 0,
        w_bottlenecks=sum(1 for nd in spec.nodes if not _sees_world(nd)),
        choice_per_agent_ratio=choice_per_agent_ratio(spec),
    )


def architecture_features(spec: ArchitectureSpec, solution) -> FeatureVector:
    """Full feature vector; needs a solved system for the specialization part."""
    if solution is None:
        raise MissingSolutionError("architecture_features needs a Solution")
    base = structural_features(spec)
    last = spec.depth
    prior = solution.priors[last - 1]
    sel_axes = tuple(f"x{s}" for s in spec.node(last).selectors)
    choice_axis = f"x{last}"
    vals = prior.values_as(sel_axes + (choice_axis,))
    flat = vals.reshape(-1, vals.shape[-1])
    specs = [
        specialization(ProbTable(row, (choice_axis,))) for row in flat
    ]
    return FeatureVector(
        average_operational_specialization=float(np.mean(specs)),
        hierarchical=base.hierarchical,
        agents_with_w_access=base.agents_with_w_access,
        operational_agents_with_w_access=base.operational_agents_with_w_access,
        w_bottlenecks=base.w_bottlenecks,
        choice_per_agent_ratio=base.choice_per_agent_ratio,
    )
