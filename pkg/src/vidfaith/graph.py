"""Dependency graph over verification questions.

Nodes are fact ids; an edge i -> j means fact i is only meaningful if
fact j holds (j is a parent of i). The graph gates score propagation
and lets the verifier skip questions whose prerequisites already
failed.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import Enum

from .dsl import Diagnostic, DiagnosticKind, Severity
from .types import FactSet, VidFaithError


class CyclePolicy(str, Enum):
    REJECT = "reject"
    BREAK = "break"


class CycleError(VidFaithError):
    """Raised under the reject policy; carries one offending cycle."""

    def __init__(self, path: list[int]):
        super().__init__("dependency cycle: " + " -> ".join(map(str, path)))
        self.path = path


@dataclass(frozen=True)
class Stsdg:
    """Immutable, validated dependency DAG.

    parents[i] lists the facts i depends on; children is the derived
    inverse. Construct through build_graph, which enforces acyclicity.
    """

    node_ids: tuple[int, ...]
    parents: dict[int, tuple[int, ...]]
    children: dict[int, tuple[int, ...]] = field(init=False)
    _topo: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        kids: dict[int, list[int]] = {n: [] for n in self.node_ids}
        for node, ps in self.parents.items():
            for parent in ps:
                kids[parent].append(node)
        object.__setattr__(
            self, "children",
            {n: tuple(sorted(c)) for n, c in kids.items()})
        object.__setattr__(self, "_topo", _kahn(self.node_ids, self.parents))

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return sum(len(p) for p in self.parents.values())

    def roots(self) -> tuple[int, ...]:
        return tuple(n for n in sorted(self.node_ids) if not self.parents[n])

    def topological_order(self) -> tuple[int, ...]:
        """Parents before children; ties broken by smallest id."""
        return self._topo

    def invalidated_closure(self, negatives: Iterable[int]) -> set[int]:
        """All transitive descendants of the negatives, negatives excluded.

        These are the facts whose prerequisites failed: they score zero
        (or leave the universe entirely, depending on configuration) and
        a lazy schedule never asks their questions.
        """
        negative_set = set(negatives)
        closure: set[int] = set()
        frontier = list(negative_set)
        while frontier:
            node = frontier.pop()
            for child in self.children.get(node, ()):
                if child not in closure:
                    closure.add(child)
                    frontier.append(child)
        return closure - negative_set

    def to_json_dict(self) -> dict:
        return {
            "nodes": list(self.node_ids),
            "parents": {str(n): list(self.parents[n]) for n in self.node_ids},
        }

    def to_dot(self) -> str:
        """GraphViz rendering; arrows point from a fact to its parents."""
        lines = ["digraph dependencies {"]
        for node in sorted(self.node_ids):
            lines.append(f"  {node};")
        for node in sorted(self.node_ids):
            for parent in self.parents[node]:
                lines.append(f"  {node} -> {parent};")
        lines.append("}")
        return "\n".join(lines)


def _kahn(node_ids: tuple[int, ...], parents: dict[int, tuple[int, ...]],
          ) -> tuple[int, ...]:
    import heapq

    remaining = {n: len(parents[n]) for n in node_ids}
    children: dict[int, list[int]] = {n: [] for n in node_ids}
    for node, ps in parents.items():
        for parent in ps:
            children[parent].append(node)
    ready = [n for n, deg in remaining.items() if deg == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            remaining[child] -= 1
            if remaining[child] == 0:
                heapq.heappush(ready, child)
    if len(order) != len(node_ids):
        raise CycleError(_find_cycle(node_ids, parents))
    return tuple(order)


def _find_cycle(node_ids: Iterable[int],
                parents: dict[int, tuple[int, ...]]) -> list[int]:
    """Locate one directed cycle; ids in dependency order, smallest first."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in node_ids}
    stack: list[int] = []

    def visit(node: int) -> list[int] | None:
        color[node] = GRAY
        stack.append(node)
        for parent in sorted(parents.get(node, ())):
            if color.get(parent, BLACK) == GRAY:
                cycle = stack[stack.index(parent):]
                pivot = cycle.index(min(cycle))
                return cycle[pivot:] + cycle[:pivot]
            if color.get(parent, BLACK) == WHITE:
                found = visit(parent)
                if found is not None:
                    return found
        stack.pop()
        color[node] = BLACK
        return None

    for start in sorted(color):
        if color[start] == WHITE:
            found = visit(start)
            if found is not None:
                return found
    raise AssertionError("no cycle found in cyclic graph")


def build_graph(
    facts: FactSet | Iterable[int],
    deps: dict[int, Iterable[int]],
    policy: CyclePolicy = CyclePolicy.REJECT,
) -> tuple[Stsdg, list[Diagnostic]]:
    """Validate a parents map into an Stsdg.

    Parents naming unknown facts are dropped with a warning, as are
    self-edges. Cycles either abort (reject) or are broken by dropping,
    per cycle, the edge whose dependent end has the largest id.
    """
    if isinstance(facts, FactSet):
        node_ids = facts.ids()
    else:
        node_ids = tuple(dict.fromkeys(facts))
    known = set(node_ids)
    diagnostics: list[Diagnostic] = []

    def warn(kind: DiagnosticKind, context: str, message: str) -> None:
        diagnostics.append(
            Diagnostic(kind, Severity.WARNING, 0, context, message))

    parents: dict[int, list[int]] = {n: [] for n in node_ids}
    for node, raw_parents in deps.items():
        if node not in known:
            warn(DiagnosticKind.DANGLING_REFERENCE, f"{node}",
                 f"dependency entry {node} matches no fact; ignored")
            continue
        for parent in raw_parents:
            if parent == node:
                warn(DiagnosticKind.SELF_DEPENDENCY, f"{node}",
                     f"fact {node} depends on itself; edge dropped")
                continue
            if parent not in known:
                warn(DiagnosticKind.DANGLING_REFERENCE, f"{node}",
                     f"parent {parent} of fact {node} matches no fact; dropped")
                continue
            if parent not in parents[node]:
                parents[node].append(parent)

    while True:
        try:
            frozen = {n: tuple(p) for n, p in parents.items()}
            return Stsdg(node_ids, frozen), diagnostics
        except CycleError as exc:
            if policy is CyclePolicy.REJECT:
                raise
            # Break the cycle at the edge whose dependent end is largest.
            cycle = exc.path
            source = max(cycle)
            target = cycle[(cycle.index(source) + 1) % len(cycle)]
            parents[source].remove(target)
            warn(DiagnosticKind.CYCLE_BROKEN, f"{source}",
                 f"cycle {'->'.join(map(str, cycle))}: "
                 f"dropped edge {source}->{target}")
