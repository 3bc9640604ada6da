"""Resistive network model: Laplacian blocks and Kron reduction.

Nodes are indexed from zero with the sources first (``0 .. n_sources-1``)
and the loads after (``n_sources .. n-1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import NetworkError, NumericalError


def _components(n: int, pairs) -> list[list[int]]:
    if not pairs:
        return [[i] for i in range(n)]
    rows = [a for a, _ in pairs]
    cols = [b for _, b in pairs]
    graph = coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    return [np.flatnonzero(labels == k).tolist() for k in range(ncomp)]


@dataclass(frozen=True)
class MicrogridNetwork:
    """Electrical graph plus the communication graph among the sources.

    Parameters
    ----------
    n_sources, n_loads : int
        Sizes of the source/load partition.
    edges : sequence of (i, j, conductance)
        Resistive lines, conductance in siemens.
    comm_edges : sequence of (i, j)
        Unweighted communication links, source indices only.
    """

    n_sources: int
    n_loads: int
    edges: tuple = field(default_factory=tuple)
    comm_edges: tuple = field(default_factory=tuple)

    def __post_init__(self):
        edges = tuple((int(i), int(j), float(g)) for i, j, g in self.edges)
        comm = tuple((int(i), int(j)) for i, j in self.comm_edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "comm_edges", comm)

        if self.n_sources < 1:
            raise NetworkError("a network needs at least one source")
        if self.n_loads < 0:
            raise NetworkError("n_loads must be non-negative")
        n = self.n_nodes

        seen = set()
        for i, j, g in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise NetworkError(f"line ({i}, {j}) references an unknown node")
            if i == j:
                raise NetworkError(f"self-loop at node {i}")
            if not g > 0.0:
                raise NetworkError(f"line ({i}, {j}) has non-positive conductance {g}")
            key = frozenset((i, j))
            if key in seen:
                raise NetworkError(f"duplicate line between {i} and {j}")
            seen.add(key)

        comps = _components(n, [(i, j) for i, j, _ in edges])
        if len(comps) > 1:
            raise NetworkError(f"electrical graph is disconnected; components: {comps}")

        seen = set()
        for i, j in comm:
            if not (0 <= i < self.n_sources and 0 <= j < self.n_sources):
                raise NetworkError(f"communication link ({i}, {j}) must join two sources")
            if i == j:
                raise NetworkError(f"communication self-loop at source {i}")
            key = frozenset((i, j))
            if key in seen:
                raise NetworkError(f"duplicate communication link between {i} and {j}")
            seen.add(key)
        comps = _components(self.n_sources, list(comm))
        if len(comps) > 1:
            raise NetworkError(f"communication graph is disconnected; components: {comps}")

    @property
    def n_nodes(self) -> int:
        return self.n_sources + self.n_loads

    def incidence(self) -> np.ndarray:
        """Node-by-edge incidence matrix (+1 at the first endpoint, -1 at the second)."""
        B = np.zeros((self.n_nodes, len(self.edges)))
        for k, (i, j, _) in enumerate(self.edges):
            B[i, k] = 1.0
            B[j, k] = -1.0
        return B

    def laplacian(self) -> np.ndarray:
        """Full weighted Laplacian ``B Γ Bᵀ``."""
        B = self.incidence()
        gamma = np.array([g for _, _, g in self.edges])
        return (B * gamma) @ B.T


@dataclass(frozen=True)
class ConductanceBlocks:
    """Source/load partition of the network Laplacian."""

    Yss: np.ndarray
    Ysl: np.ndarray
    Yls: np.ndarray
    Yll: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.Yss.shape[0]

    @property
    def n_loads(self) -> int:
        return self.Yll.shape[0]

    def full(self) -> np.ndarray:
        return np.block([[self.Yss, self.Ysl], [self.Yls, self.Yll]])


def build_laplacian(net: MicrogridNetwork) -> ConductanceBlocks:
    L = net.laplacian()
    ns = net.n_sources
    blocks = (L[:ns, :ns], L[:ns, ns:], L[ns:, :ns], L[ns:, ns:])
    for b in blocks:
        b.setflags(write=False)
    return ConductanceBlocks(*blocks)


def _symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def kron_reduce_with_shunts(blocks: ConductanceBlocks, Ystar=None) -> np.ndarray:
    """Eliminate load nodes after adding shunt conductances ``Ystar`` at the loads.

    Returns ``Yss - Ysl (Yll + diag(Ystar))⁻¹ Yls``.
    """
    if blocks.n_loads == 0:
        return np.array(blocks.Yss, dtype=float)
    A = np.array(blocks.Yll, dtype=float)
    if Ystar is not None:
        Ystar = np.asarray(Ystar, dtype=float)
        if Ystar.ndim == 2:
            Ystar = np.diag(Ystar)
        if np.any(Ystar < 0):
            raise ValueError("shunt conductances must be non-negative")
        A = A + np.diag(Ystar)
    try:
        X = np.linalg.solve(A, blocks.Yls)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("load block is singular; cannot Kron-reduce") from exc
    return _symmetrize(blocks.Yss - blocks.Ysl @ X)


def kron_reduce(blocks: ConductanceBlocks) -> np.ndarray:
    """Kron-reduced conductance matrix ``Yss - Ysl Yll⁻¹ Yls``."""
    return kron_reduce_with_shunts(blocks, None)


def comm_laplacian(net: MicrogridNetwork) -> np.ndarray:
    """Unweighted Laplacian of the communication graph."""
    L = np.zeros((net.n_sources, net.n_sources))
    for i, j in net.comm_edges:
        L[i, j] -= 1.0
        L[j, i] -= 1.0
        L[i, i] += 1.0
        L[j, j] += 1.0
    return L
