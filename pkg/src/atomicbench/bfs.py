"""Level-synchronous parallel BFS with atomic parent claims.

The traversal builds a parent array (one cell per vertex, -1 = unreached)
over a shared CSR graph.  Workers expand disjoint frontier slices and claim
newly discovered vertices with one of three atomic disciplines:

  * CAS   compare-from -1, swap in the parent; losers do nothing and the
          failed attempts are counted as wasted work;
  * SWP   unconditional exchange; a non(-1) previous value means another
          same-level claim was overwritten, which is harmless because both
          candidate parents sit one level up (level synchrony), so no
          repair is needed;
  * FAA   fetch-and-add of (parent+1) onto the -1 cell; the first adder
          leaves exactly its parent label behind, every other adder
          corrupts the cell and records its delta in a side list that is
          reverted after the level barrier.  The variant exists to show
          what an always-succeeding primitive costs here.

Graphs come from a stochastic-Kronecker generator with the Graph500
reference initiator probabilities (A=0.57, B=0.19, C=0.19) or from an edge
list file.  Validation is independent of the claim machinery: a
single-threaded level expansion computes distances and every tree
invariant is checked against them.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidRoot, ParseError, ValidationError

KRONECKER_A = 0.57
KRONECKER_B = 0.19
KRONECKER_C = 0.19

CLAIMS = ("cas", "swp", "faa")
_CLAIM_CODE = {
    "cas": _kernels.CLAIM_CAS,
    "swp": _kernels.CLAIM_SWP,
    "faa": _kernels.CLAIM_FAA,
}


@dataclass
class Graph:
    n: int
    indptr: np.ndarray  # int64, len n+1
    indices: np.ndarray  # int64, both edge directions
    generator: str = "file"

    @property
    def n_directed_edges(self) -> int:
        return int(self.indices.size)

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @classmethod
    def from_edges(cls, n: int, heads: np.ndarray, tails: np.ndarray,
                   generator: str = "file") -> "Graph":
        heads = np.asarray(heads, dtype=np.int64)
        tails = np.asarray(tails, dtype=np.int64)
        if heads.size != tails.size:
            raise ValidationError("edge endpoint arrays differ in length")
        if heads.size and (heads.min() < 0 or tails.min() < 0
                           or heads.max() >= n or tails.max() >= n):
            raise ValidationError("vertex label out of range")
        src = np.concatenate([heads, tails])
        dst = np.concatenate([tails, heads])
        order = np.argsort(src, kind="stable")
        indices = np.ascontiguousarray(dst[order])
        counts = np.bincount(src, minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(n=n, indptr=indptr, indices=indices, generator=generator)


def kronecker(scale: int, edgefactor: int, seed: int) -> Graph:
    """Stochastic Kronecker graph: 2^scale vertices, ~edgefactor*2^scale
    edges, heavy-tailed degrees; deterministic per seed."""
    if scale < 1 or edgefactor < 1:
        raise ValidationError("scale and edgefactor must be >= 1")
    rng = np.random.default_rng(seed)
    n = 1 << scale
    m = edgefactor * n
    ab = KRONECKER_A + KRONECKER_B
    c_norm = KRONECKER_C / (1.0 - ab)
    a_norm = KRONECKER_A / ab
    heads = np.zeros(m, dtype=np.int64)
    tails = np.zeros(m, dtype=np.int64)
    for bit in range(scale):
        head_bit = rng.random(m) > ab
        tail_bit = rng.random(m) > np.where(head_bit, c_norm, a_norm)
        heads += (1 << bit) * head_bit
        tails += (1 << bit) * tail_bit
    relabel = rng.permutation(n).astype(np.int64)
    heads = relabel[heads]
    tails = relabel[tails]
    shuffle = rng.permutation(m)
    return Graph.from_edges(n, heads[shuffle], tails[shuffle],
                            generator=f"kronecker({scale},{edgefactor},{seed})")


def load_edge_list(path, n: int | None = None) -> Graph:
    """Two whitespace-separated vertex labels per line; # starts a comment."""
    heads, tails = [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'u v'")
            try:
                heads.append(int(parts[0]))
                tails.append(int(parts[1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if n is None:
        n = max(max(heads, default=-1), max(tails, default=-1)) + 1
    if n <= 0:
        raise ParseError(f"{path}: no vertices")
    return Graph.from_edges(n, np.asarray(heads, dtype=np.int64),
                            np.asarray(tails, dtype=np.int64))


@dataclass
class BfsTree:
    parent: np.ndarray  # int64, -1 = unreached, parent[root] = root
    root: int


@dataclass
class BfsStats:
    claim: str
    workers: int
    levels: int = 0
    edges_examined: int = 0
    claims_won: int = 0
    claims_lost: int = 0
    repairs: int = 0
    elapsed_s: float = 0.0

    @property
    def teps(self) -> float:
        """Directed edge examinations per second (each edge counted once
        per examination)."""
        return self.edges_examined / self.elapsed_s if self.elapsed_s else 0.0


def bfs(graph: Graph, root: int, claim: str = "cas", workers: int = 1,
        check: bool = False) -> tuple[BfsTree, BfsStats]:
    """Parallel level-synchronous traversal; returns the tree and stats.

    `check` re-validates the finished tree against the independent oracle
    and raises on any violation; it is the runtime guard behind the
    no-repair argument for the swap discipline (an overwritten parent can
    only come from the same level, so both candidates are valid)."""
    if not 0 <= root < graph.n:
        raise InvalidRoot(f"root {root} not in 0..{graph.n - 1}")
    if claim not in CLAIMS:
        raise ValidationError(f"claim must be one of {CLAIMS}")
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    code = _CLAIM_CODE[claim]
    n = graph.n
    parent = np.full(n, -1, dtype=np.int64)
    parent[root] = root
    frontier = np.array([root], dtype=np.int64)
    outs = [np.empty(n, dtype=np.int64) for _ in range(workers)]
    side_cap = max(4096, min(graph.n_directed_edges, 4 * n))
    sides = [np.empty(2 * side_cap, dtype=np.int64) if claim == "faa"
             else np.empty(2, dtype=np.int64) for _ in range(workers)]
    stats = BfsStats(claim=claim, workers=workers)

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while frontier.size:
            stats.levels += 1
            bounds = np.linspace(0, frontier.size, workers + 1, dtype=np.int64)
            futs = []
            for w in range(workers):
                f0, f1 = int(bounds[w]), int(bounds[w + 1])
                if f0 == f1:
                    continue
                futs.append((w, pool.submit(
                    _kernels.bfs_level, code, graph.indptr, graph.indices,
                    parent, frontier, f0, f1, outs[w], sides[w],
                )))
            parts = []
            repairs_v, repairs_d = [], []
            for w, fut in futs:
                nout, wins, losses, edges, nside = fut.result()
                stats.claims_won += wins
                stats.claims_lost += losses
                stats.edges_examined += edges
                if nout:
                    parts.append(outs[w][:nout].copy())
                if nside:
                    pairs = sides[w][:2 * nside].reshape(-1, 2)
                    repairs_v.append(pairs[:, 0].copy())
                    repairs_d.append(pairs[:, 1].copy())
            # level barrier passed: revert every conflicting FAA delta
            if repairs_v:
                v = np.concatenate(repairs_v)
                d = np.concatenate(repairs_d)
                np.subtract.at(parent, v, d)
                stats.repairs += int(v.size)
            frontier = np.concatenate(parts) if parts else \
                np.empty(0, dtype=np.int64)
    stats.elapsed_s = time.perf_counter() - t0
    tree = BfsTree(parent=parent, root=root)
    if check:
        verdict = validate(graph, root, tree)
        if not verdict.valid:
            raise ValidationError(
                f"{claim} traversal produced an invalid tree: "
                f"{verdict.violations[:3]}"
            )
    return tree, stats


def sequential_levels(graph: Graph, root: int) -> np.ndarray:
    """Single-threaded level expansion, independent of the claim kernels;
    the validation oracle.  Returns per-vertex levels, -1 = unreached."""
    if not 0 <= root < graph.n:
        raise InvalidRoot(f"root {root} not in 0..{graph.n - 1}")
    levels = np.full(graph.n, -1, dtype=np.int64)
    levels[root] = 0
    frontier = np.array([root], dtype=np.int64)
    depth = 0
    while frontier.size:
        starts = graph.indptr[frontier]
        counts = graph.indptr[frontier + 1] - starts
        total = int(counts.sum())
        if total:
            base = np.repeat(starts, counts)
            step = np.arange(total, dtype=np.int64) - np.repeat(
                np.cumsum(counts) - counts, counts)
            nbrs = graph.indices[base + step]
            fresh = np.unique(nbrs[levels[nbrs] == -1])
        else:
            fresh = np.empty(0, dtype=np.int64)
        depth += 1
        levels[fresh] = depth
        frontier = fresh
    return levels


@dataclass
class Verdict:
    valid: bool
    violations: list = field(default_factory=list)


def validate(graph: Graph, root: int, tree: BfsTree,
             max_violations: int = 20) -> Verdict:
    """Check every tree invariant against the independent oracle levels."""
    violations: list[str] = []

    def report(msg):
        if len(violations) < max_violations:
            violations.append(msg)

    levels = sequential_levels(graph, root)
    parent = tree.parent
    if parent.shape != (graph.n,):
        return Verdict(False, [f"parent array has shape {parent.shape}"])
    if parent[root] != root:
        report(f"parent[root]={parent[root]}, expected the root itself")

    reached = levels >= 0
    claimed = parent >= 0
    mismatched = np.flatnonzero(reached != claimed)
    for v in mismatched[:max_violations]:
        if reached[v]:
            report(f"vertex {v} is reachable but unclaimed")
        else:
            report(f"vertex {v} is unreachable but claimed (parent {parent[v]})")
    bad_range = np.flatnonzero(claimed & (parent >= graph.n))
    for v in bad_range[:max_violations]:
        report(f"vertex {v} has out-of-range parent {parent[v]}")

    ok = reached & claimed & (parent < graph.n)
    ok[root] = False
    vs = np.flatnonzero(ok)
    if vs.size:
        # level relation: the parent sits exactly one level up
        bad = vs[levels[parent[vs]] != levels[vs] - 1]
        for v in bad[:max_violations]:
            report(
                f"vertex {v} at level {levels[v]} has parent {parent[v]} "
                f"at level {levels[parent[v]]}"
            )
        # tree edges must exist in the graph
        keys = np.sort(graph.indices
                       + graph.n * np.repeat(
                           np.arange(graph.n, dtype=np.int64),
                           np.diff(graph.indptr)))
        probe = parent[vs] * graph.n + vs
        pos = np.searchsorted(keys, probe)
        present = (pos < keys.size) & (keys[np.minimum(pos, keys.size - 1)]
                                       == probe)
        for v in vs[~present][:max_violations]:
            report(f"tree edge ({parent[v]}, {v}) is not a graph edge")

    return Verdict(valid=not violations, violations=violations)
