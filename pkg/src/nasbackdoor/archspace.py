"""Cell architectures over the 4-node / 5-operator topology.

An architecture assigns one operator to each of the six edges of the cell
DAG.  Edges are ordered ``(1,0), (2,0), (2,1), (3,0), (3,1), (3,2)`` which
is also the order in which they appear in the canonical string
``|op~0|+|op~0|op~1|+|op~0|op~1|op~2|``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

OPERATORS: tuple[str, ...] = (
    "none",
    "skip_connect",
    "nor_conv_1x1",
    "nor_conv_3x3",
    "avg_pool_3x3",
)
NUM_OPS = len(OPERATORS)
EDGES: tuple[tuple[int, int], ...] = ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2))
NUM_EDGES = len(EDGES)

# short aliases accepted on input
_ALIASES = {
    "conv_1x1": "nor_conv_1x1",
    "conv_3x3": "nor_conv_3x3",
    "skip": "skip_connect",
}


class ArchParseError(ValueError):
    def __init__(self, message: str, token: str, position: int):
        super().__init__(f"{message}: {token!r} at position {position}")
        self.token = token
        self.position = position


def operator_index(tag: str) -> int:
    tag = _ALIASES.get(tag, tag)
    try:
        return OPERATORS.index(tag)
    except ValueError:
        raise ValueError(f"unknown operator {tag!r}") from None


@dataclass(frozen=True, order=True)
class ArchSpec:
    """Operator assignment on the six cell edges (stored as canonical tags)."""

    edges: tuple[str, ...]

    def __post_init__(self):
        edges = tuple(_ALIASES.get(e, e) for e in self.edges)
        if len(edges) != NUM_EDGES:
            raise ValueError(f"expected {NUM_EDGES} edges, got {len(edges)}")
        for e in edges:
            operator_index(e)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_indices(cls, idx: Iterable[int]) -> "ArchSpec":
        return cls(tuple(OPERATORS[int(i)] for i in idx))

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(OPERATORS.index(e) for e in self.edges)

    def edge_op(self, dst: int, src: int) -> str:
        return self.edges[EDGES.index((dst, src))]

    def __str__(self) -> str:
        return format_arch(self)


def format_arch(a: ArchSpec) -> str:
    groups = []
    k = 0
    for dst in (1, 2, 3):
        cells = []
        for src in range(dst):
            cells.append(f"{a.edges[k]}~{src}")
            k += 1
        groups.append("|" + "|".join(cells) + "|")
    return "+".join(groups)


def parse_arch(text: str) -> ArchSpec:
    text = text.strip()
    groups = text.split("+")
    ops: list[str] = []
    pos = 0
    for dst, group in enumerate(groups, start=1):
        if dst > 3:
            raise ArchParseError("too many groups", group, pos)
        if len(group) < 2 or not (group.startswith("|") and group.endswith("|")):
            raise ArchParseError("group must be enclosed in '|'", group, pos)
        cells = group[1:-1].split("|")
        if len(cells) != dst:
            raise ArchParseError(f"group {dst} needs {dst} cells", group, pos)
        cpos = pos + 1
        for expected_src, cell in enumerate(cells):
            op, sep, src = cell.partition("~")
            if not sep or not src.isdigit():
                raise ArchParseError("cell must read <op>~<src>", cell, cpos)
            if op not in OPERATORS:
                raise ArchParseError("unknown operator", op, cpos)
            s = int(src)
            if s >= dst:
                raise ArchParseError(f"source must be < {dst}", src, cpos + len(op) + 1)
            if s != expected_src:
                raise ArchParseError(f"expected source {expected_src}", src, cpos + len(op) + 1)
            ops.append(op)
            cpos += len(cell) + 1
        pos += len(group) + 1
    if len(groups) != 3:
        raise ArchParseError("expected 3 '+'-separated groups", text, pos)
    return ArchSpec(tuple(ops))


def random_arch(rng: np.random.Generator) -> ArchSpec:
    return ArchSpec.from_indices(rng.integers(0, NUM_OPS, size=NUM_EDGES))


def mutate_arch(a: ArchSpec, rng: np.random.Generator, edge: int | None = None) -> ArchSpec:
    """Replace the operator on one edge (random unless ``edge`` is given) with a different one."""
    idx = list(a.indices)
    if edge is None:
        edge = int(rng.integers(NUM_EDGES))
    shift = int(rng.integers(1, NUM_OPS))
    idx[edge] = (idx[edge] + shift) % NUM_OPS
    return ArchSpec.from_indices(idx)


def hamming(a: ArchSpec, b: ArchSpec) -> int:
    return sum(x != y for x, y in zip(a.edges, b.edges))


def enumerate_space() -> Iterator[ArchSpec]:
    for idx in itertools.product(range(NUM_OPS), repeat=NUM_EDGES):
        yield ArchSpec.from_indices(idx)


def neighbors_on_edges(
    a: ArchSpec, edge_indices: Sequence[int], allowed: Sequence[str]
) -> list[ArchSpec]:
    edge_indices = list(edge_indices)
    if not edge_indices:
        return [a]
    if not allowed:
        raise ValueError("allowed operator set is empty")
    if any(not 0 <= e < NUM_EDGES for e in edge_indices):
        raise ValueError(f"edge indices must lie in 0..{NUM_EDGES - 1}")
    allowed = [_ALIASES.get(o, o) for o in allowed]
    out = []
    for combo in itertools.product(allowed, repeat=len(edge_indices)):
        edges = list(a.edges)
        for e, op in zip(edge_indices, combo):
            edges[e] = op
        out.append(ArchSpec(tuple(edges)))
    return out
