"""Undirected county-adjacency graphs and global Moran's I."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGraph:
    n: int
    edges: tuple[tuple[int, int], ...]  # each pair stored once with u < v, sorted
    neighbor_lists: tuple[tuple[int, ...], ...]
    coords: np.ndarray | None = None

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.neighbor_lists[v]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbor_lists], dtype=np.intp)

    @cached_property
    def edge_array(self) -> np.ndarray:
        return np.array(self.edges, dtype=np.intp).reshape(-1, 2)

    @cached_property
    def self_loop_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dst, src, starts) over N_v ∪ {v}, grouped by dst, src ascending within a group."""
        dst, src = [], []
        for v in range(self.n):
            members = sorted(self.neighbor_lists[v] + (v,))
            dst.extend([v] * len(members))
            src.extend(members)
        dst_a = np.array(dst, dtype=np.intp)
        src_a = np.array(src, dtype=np.intp)
        starts = np.concatenate(([0], np.cumsum(self.degree + 1)[:-1])).astype(np.intp) if self.n else np.zeros(0, np.intp)
        return dst_a, src_a, starts

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a


def build_from_edges(n: int, raw_edges: Iterable[Sequence[int]], coords=None) -> SpatialGraph:
    if n < 0:
        raise GraphError(f"node count must be nonnegative, got {n}")
    pairs = set()
    for pair in raw_edges:
        u, v = int(pair[0]), int(pair[1])
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u}, {v}) out of range for {n} nodes")
        if u == v:
            raise GraphError(f"self-loop ({u}, {v}) not allowed; self-attention is added by the model")
        pairs.add((min(u, v), max(u, v)))
    edges = tuple(sorted(pairs))
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (n, 2):
            raise GraphError(f"coords must have shape ({n}, 2), got {coords.shape}")
        coords.setflags(write=False)
    return SpatialGraph(n, edges, tuple(tuple(sorted(nb)) for nb in nbrs), coords)


def induced_subgraph(g: SpatialGraph, nodes) -> SpatialGraph:
    """Subgraph on ``nodes`` (renumbered 0..k-1 in the given order)."""
    nodes = [int(v) for v in nodes]
    pos = {v: i for i, v in enumerate(nodes)}
    if len(pos) != len(nodes):
        raise GraphError("induced_subgraph: repeated node ids")
    edges = [(pos[u], pos[v]) for u, v in g.edges if u in pos and v in pos]
    coords = None if g.coords is None else np.asarray(g.coords)[nodes]
    return build_from_edges(len(nodes), edges, coords)


def grid_graph(rows: int, cols: int) -> SpatialGraph:
    """Rook lattice with row-major ids; coords are (col, row)."""
    if rows < 1 or cols < 1:
        raise GraphError("grid needs at least one row and one column")
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    coords = [(c, r) for r in range(rows) for c in range(cols)]
    return build_from_edges(rows * cols, edges, coords)


def read_edges(path: str | Path, n: int, coords=None) -> SpatialGraph:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["u", "v"]:
            raise GraphError(f"{path}: expected header 'u,v', got {reader.fieldnames}")
        raw = []
        for lineno, row in enumerate(reader, start=2):
            try:
                u, v = int(row["u"]), int(row["v"])
            except (TypeError, ValueError):
                raise GraphError(f"{path}:{lineno}: non-integer node id in {row}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"{path}:{lineno}: edge ({u}, {v}) references a node outside [0, {n})")
            raw.append((u, v))
    try:
        return build_from_edges(n, raw, coords)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from None


def write_edges(g: SpatialGraph, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v"])
        w.writerows(g.edges)


# --- Moran's I --------------------------------------------------------------

def _centered(g: SpatialGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.n,):
        raise GraphError(f"expected {g.n} values, got shape {x.shape}")
    if g.n < 3:
        raise GraphError("Moran's I needs at least 3 nodes")
    if g.n_edges == 0:
        raise GraphError("Moran's I is undefined on an edgeless graph")
    if not np.all(np.isfinite(x)):
        raise GraphError("values must be finite")
    z = x - x.mean()
    if not np.any(np.abs(z) > 1e-12 * max(1.0, np.abs(x).max())):
        raise DegenerateFieldError("values have zero variance")
    return z


def _moran_from_centered(g: SpatialGraph, z: np.ndarray) -> np.ndarray:
    # z may be (n,) or (trials, n); binary weights counted in both directions
    e = g.edge_array
    cross = 2.0 * np.sum(z[..., e[:, 0]] * z[..., e[:, 1]], axis=-1)
    return (g.n / (2.0 * g.n_edges)) * cross / np.sum(z * z, axis=-1)


def morans_i(g: SpatialGraph, x) -> float:
    """Global Moran's I with binary symmetric weights (W = 2|E|)."""
    return float(_moran_from_centered(g, _centered(g, x)))


def morans_i_significance(g: SpatialGraph, x, n_perms: int = 999, seed: int = 0) -> tuple[float, float]:
    """Observed I and the one-sided permutation p-value for positive autocorrelation."""
    if n_perms < 99:
        raise ValueError("use at least 99 permutations")
    z = _centered(g, x)
    observed = _moran_from_centered(g, z)
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.broadcast_to(z, (n_perms, g.n)), axis=1)
    sims = _moran_from_centered(g, perms)
    p = (1 + int(np.sum(sims >= observed))) / (1 + n_perms)
    return float(observed), p
