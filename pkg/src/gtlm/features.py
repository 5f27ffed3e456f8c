"""Structural features of a graph: SPD buckets, random-walk powers, magnetic spectrum."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import TextAttributedGraph, undirected_neighbors


class ConvergenceFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class StructuralFeatures:
    spd: np.ndarray  # (N, N) int bucket indices
    rrwp: np.ndarray  # (N, N, K) walk probabilities
    mag_eigvals: np.ndarray  # (N,) ascending
    mag_eigvecs: np.ndarray  # (N, N) complex, columns orthonormal

    @property
    def num_nodes(self) -> int:
        return self.spd.shape[0]

    def permuted(self, perm) -> "StructuralFeatures":
        """Features of the graph whose node ``i`` is this graph's node ``perm[i]``."""
        p = np.asarray(perm)
        return StructuralFeatures(
            self.spd[np.ix_(p, p)],
            self.rrwp[np.ix_(p, p)],
            self.mag_eigvals,
            self.mag_eigvecs[p],
        )


def shortest_path_distances(g: TextAttributedGraph, max_spd: int = 8) -> np.ndarray:
    """BFS hop counts on the symmetrized graph, bucketed.

    Reachable distances are clamped to ``max_spd - 1``; unreachable pairs get
    the sentinel bucket ``max_spd``.
    """
    if max_spd < 2:
        raise ValueError("max_spd must be >= 2")
    n = g.num_nodes
    nbrs = undirected_neighbors(g)
    out = np.full((n, n), max_spd, dtype=np.int64)
    for s in range(n):
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        for v, d in dist.items():
            out[s, v] = min(d, max_spd - 1)
    return out


def transition_matrix(adj: np.ndarray) -> np.ndarray:
    """Row-normalized ``D^-1 A``; rows with zero out-degree stay zero."""
    deg = adj.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg, dtype=float), where=deg > 0)
    return adj * inv[:, None]


def rrwp(g: TextAttributedGraph, K: int = 16) -> np.ndarray:
    """Stack ``[I, M, M^2, ..., M^(K-1)]`` along the last axis."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n = g.num_nodes
    m = transition_matrix(g.adjacency())
    out = np.empty((n, n, K))
    power = np.eye(n)
    for k in range(K):
        out[:, :, k] = power
        power = power @ m
    return out


def magnetic_laplacian(g: TextAttributedGraph, q: float = 0.25) -> np.ndarray:
    """Normalized magnetic Laplacian ``I - (D_s^-1/2 A_s D_s^-1/2) * exp(i Theta)``.

    Isolated nodes have a zero normalized row, so their diagonal entry is 1.
    """
    a = g.adjacency()
    a_s = 0.5 * (a + a.T)
    d_s = a_s.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(d_s), out=np.zeros_like(d_s), where=d_s > 0)
    theta = 2.0 * np.pi * q * (a - a.T)
    norm_adj = inv_sqrt[:, None] * a_s * inv_sqrt[None, :]
    lap = np.eye(len(a), dtype=complex) - norm_adj * np.exp(1j * theta)
    # exp(i*theta) is exactly conjugate-symmetric only up to rounding
    return 0.5 * (lap + lap.conj().T)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition all index pairs into ``n - 1`` (or ``n``) rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def hermitian_eigendecomposition(
    mat: np.ndarray, tol: float = 1e-10, max_rotations: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic complex Jacobi diagonalization of a Hermitian matrix.

    Each rotation first strips the phase of the pivot ``A[p, q]`` and then
    applies a real Givens rotation; disjoint pivot pairs are rotated together.
    Stops once the off-diagonal Frobenius norm falls to ``tol``.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(mat, dtype=complex)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if n and np.max(np.abs(a - a.conj().T)) > 1e-10:
        raise ValueError("matrix is not Hermitian")
    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=complex)
    if max_rotations is None:
        max_rotations = 100 * n * n
    rounds = _round_robin(n) if n > 1 else []
    rotations = 0

    off_diag = ~np.eye(n, dtype=bool)

    def off_norm(x):
        return np.linalg.norm(x[off_diag])

    while off_norm(a) > tol:
        if rotations >= max_rotations:
            raise ConvergenceFailure(f"off-diagonal norm {off_norm(a):.3e} after {rotations} rotations")
        swept = 0
        for p, q in rounds:
            apq = a[p, q]
            r = np.abs(apq)
            active = r > 1e-300
            if not active.any():
                continue
            swept += 1
            p, q, apq, r = p[active], q[active], apq[active], r[active]
            phase = apq / r  # e^{i alpha}
            app, aqq = a[p, p].real, a[q, q].real
            zeta = (aqq - app) / (2.0 * r)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(zeta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # G = diag(1, conj(phase)) @ [[c, s], [-s, c]] on the (p, q) block
            g_pp, g_pq = c, s
            g_qp, g_qq = -s * phase.conj(), c * phase.conj()

            col_p, col_q = a[:, p].copy(), a[:, q].copy()
            a[:, p] = col_p * g_pp + col_q * g_qp
            a[:, q] = col_p * g_pq + col_q * g_qq
            row_p, row_q = a[p, :].copy(), a[q, :].copy()
            a[p, :] = np.conj(g_pp)[:, None] * row_p + np.conj(g_qp)[:, None] * row_q
            a[q, :] = np.conj(g_pq)[:, None] * row_p + np.conj(g_qq)[:, None] * row_q
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * g_pp + vq * g_qp
            v[:, q] = vp * g_pq + vq * g_qq
            rotations += len(p)
        if not swept:
            break

    eigvals = np.diag(a).real.copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], v[:, order]


def compute_features(
    g: TextAttributedGraph, max_spd: int = 8, K: int = 16, q: float = 0.25
) -> StructuralFeatures:
    lam, vecs = hermitian_eigendecomposition(magnetic_laplacian(g, q))
    return StructuralFeatures(shortest_path_distances(g, max_spd), rrwp(g, K), lam, vecs)


def features_to_record(f: StructuralFeatures) -> dict:
    return {
        "num_nodes": f.num_nodes,
        "spd": f.spd.tolist(),
        "rrwp": f.rrwp.tolist(),
        "mag_eigvals": f.mag_eigvals.tolist(),
        "mag_eigvecs_real": f.mag_eigvecs.real.tolist(),
        "mag_eigvecs_imag": f.mag_eigvecs.imag.tolist(),
    }


def features_from_record(rec: dict) -> StructuralFeatures:
    return StructuralFeatures(
        np.asarray(rec["spd"], dtype=np.int64),
        np.asarray(rec["rrwp"], dtype=float).reshape(rec["num_nodes"], rec["num_nodes"], -1),
        np.asarray(rec["mag_eigvals"], dtype=float),
        np.asarray(rec["mag_eigvecs_real"]) + 1j * np.asarray(rec["mag_eigvecs_imag"]),
    )


def write_features(path: str | Path, feats: list[StructuralFeatures]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in feats:
            fh.write(json.dumps(features_to_record(f)) + "\n")
