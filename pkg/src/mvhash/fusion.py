"""Query-specific rank fusion across hash tables via a random walk with restart.

Each table's top candidates (plus the query) become vertices of a graph whose
edge weights come from inner products of truncated anchor similarities in the
weighted Hamming space. Graphs from all tables are superposed, the weight
matrix is row-normalized into a transition matrix, and a restart walk that
keeps most of its mass on the query scores every candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .anchors import SparseEmbedding
from .hashing import PackedCodes, words_per_item
from .qrank import HashTable, QueryParams, QRankResult, qrank_query

QUERY_VERTEX = -1


@dataclass
class CandidateGraph:
    """One table's candidate graph: global vertex ids (query = -1) and edge weights."""

    table_id: int
    vertices: np.ndarray
    edges: sp.csr_matrix
    isolated: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if self.isolated is None:
            self.isolated = np.zeros(len(self.vertices), dtype=bool)


@dataclass
class FusedGraph:
    """Union graph with superposed weights; transition/restart filled in later."""

    vertices: np.ndarray
    omega: sp.csr_matrix
    transition: Optional[sp.csr_matrix] = None
    restart: Optional[np.ndarray] = None
    alpha: float = 0.85


@dataclass
class RankScores:
    """Stationary visiting probabilities over the fused vertices."""

    r: np.ndarray
    iterations: int
    converged: bool
    history: Optional[list] = None


@dataclass
class QsrfParams:
    """Knobs for the fused reranking pipeline."""

    top_n: int = 1000
    alpha: float = 0.85
    restart_mass: float = 0.99
    walk_tol: float = 1e-10
    walk_max_iters: int = 1000
    query: QueryParams = field(default_factory=QueryParams)


@dataclass
class QsrfResult:
    ids: np.ndarray
    scores: np.ndarray
    per_table: list
    fused: FusedGraph
    walk: RankScores


def candidate_embedding(
    candidate_words: np.ndarray,
    anchor_codes: PackedCodes,
    bits: int,
    wstar: np.ndarray,
    s_nn: int,
    sigma_h: Optional[float] = None,
) -> SparseEmbedding:
    """Truncated anchor similarities of candidates under weighted Hamming distance.

    Every candidate row (the query included) keeps its s_nn nearest anchors by
    weighted Hamming distance; kept entries are exp(-d_H / sigma_h) normalized
    to sum 1. sigma_h defaults to sum(w*), the largest attainable weighted
    distance. Ties on distance keep the lower anchor id.
    """
    wstar = np.asarray(wstar, dtype=np.float64)
    if sigma_h is None:
        sigma_h = float(wstar.sum())
    if sigma_h <= 0:
        sigma_h = 1.0
    if s_nn > anchor_codes.n:
        raise ValueError(f"s_nn={s_nn} exceeds anchor count {anchor_codes.n}")
    cand_bits = _unpack_words(np.asarray(candidate_words, np.uint64), bits)
    anch_bits = _unpack_words(anchor_codes.words, bits)
    # d_ij = sum_k w_k (c_ik xor a_jk) expands into two weighted matmuls
    cw = cand_bits * wstar
    ncw = (1.0 - cand_bits) * wstar
    d = cw @ (1.0 - anch_bits).T + ncw @ anch_bits.T
    order = np.argsort(d, axis=1, kind="stable")[:, :s_nn]
    kept = np.take_along_axis(d, order, axis=1)
    vals = np.exp(-(kept - kept[:, :1]) / sigma_h)  # shift cancels in the normalization
    np.maximum(vals, 1e-300, out=vals)
    vals /= vals.sum(axis=1, keepdims=True)
    return SparseEmbedding(indices=order.astype(np.int32), values=vals)


def _unpack_words(words: np.ndarray, bits: int) -> np.ndarray:
    n = words.shape[0]
    as_bytes = np.ascontiguousarray(words).view(np.uint8).reshape(n, -1)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :bits].astype(np.float64)


def candidate_similarity(z: SparseEmbedding, n_anchors: int):
    """Edge weights S_ij = <Z_i,Z_j>/lambda_i + <Z_i,Z_j>/lambda_j, zero diagonal.

    lambda_i sums <Z_i, Z_j> over every row j of this graph. Rows with
    lambda_i = 0 get no edges and are flagged isolated. Returns (S, isolated).
    """
    n = z.n
    indptr = np.arange(0, (n + 1) * z.indices.shape[1], z.indices.shape[1])
    zmat = sp.csr_matrix((z.values.ravel(), z.indices.ravel(), indptr), shape=(n, n_anchors))
    g = (zmat @ zmat.T).tocsr()
    lam = np.asarray(g.sum(axis=1)).ravel()
    isolated = lam <= 0.0
    inv = np.zeros(n)
    inv[~isolated] = 1.0 / lam[~isolated]
    half = sp.diags(inv) @ g
    s = (half + half.T).tolil()
    s.setdiag(0.0)
    s = s.tocsr()
    s.eliminate_zeros()
    return s, isolated


def build_candidate_graph(table: HashTable, table_id: int, result: QRankResult) -> CandidateGraph:
    """Assemble one table's graph from its ranked candidates; query vertex first."""
    cand_words = np.vstack([
        result.query_words[None, :],
        table.codes.words[result.local_ids],
    ])
    z = candidate_embedding(
        cand_words,
        table.anchor_model.anchor_codes,
        table.hash_model.bits,
        result.weights.calibrated,
        table.anchor_model.s_nn,
    )
    s, isolated = candidate_similarity(z, table.anchor_model.k)
    vertices = np.concatenate(([QUERY_VERTEX], result.ids))
    return CandidateGraph(table_id=table_id, vertices=vertices, edges=s, isolated=isolated)


def fuse(graphs: Sequence[CandidateGraph]) -> FusedGraph:
    """Superpose candidate graphs: union vertices, sum edge weights elementwise."""
    if not graphs:
        raise ValueError("fuse needs at least one graph")
    for gr in graphs:
        if QUERY_VERTEX not in gr.vertices:
            raise ValueError(f"graph {gr.table_id} lacks the query vertex")
    union = np.unique(np.concatenate([gr.vertices for gr in graphs]))
    nv = len(union)
    omega = sp.csr_matrix((nv, nv))
    for gr in graphs:
        pos = np.searchsorted(union, gr.vertices)
        coo = gr.edges.tocoo()
        remapped = sp.coo_matrix(
            (coo.data, (pos[coo.row], pos[coo.col])), shape=(nv, nv)
        )
        omega = omega + remapped.tocsr()
    return FusedGraph(vertices=union, omega=omega)


def transition_and_restart(fused: FusedGraph, alpha: float = 0.85, restart_mass: float = 0.99) -> FusedGraph:
    """Fill P (row-normalized omega, dangling rows uniform) and the restart vector."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    nv = len(fused.vertices)
    rowsum = np.asarray(fused.omega.sum(axis=1)).ravel()
    dangling = rowsum <= 0.0
    inv = np.zeros(nv)
    inv[~dangling] = 1.0 / rowsum[~dangling]
    p = sp.diags(inv) @ fused.omega
    if dangling.any():
        rows = np.repeat(np.flatnonzero(dangling), nv)
        cols = np.tile(np.arange(nv), int(dangling.sum()))
        uniform = sp.coo_matrix(
            (np.full(len(rows), 1.0 / nv), (rows, cols)), shape=(nv, nv)
        )
        p = p + uniform.tocsr()
    qpos = np.flatnonzero(fused.vertices == QUERY_VERTEX)
    if len(qpos) != 1:
        raise ValueError("fused graph must contain exactly one query vertex")
    restart = np.zeros(nv)
    if nv == 1:
        restart[0] = 1.0
    else:
        restart[:] = (1.0 - restart_mass) / (nv - 1)
        restart[qpos[0]] = restart_mass
    fused.transition = p.tocsr()
    fused.restart = restart
    fused.alpha = alpha
    return fused


def random_walk(
    fused: FusedGraph,
    tol: float = 1e-10,
    max_iters: int = 1000,
    record_history: bool = False,
) -> RankScores:
    """Iterate r <- (1-alpha) restart + alpha P^T r from r0 = restart."""
    if fused.transition is None or fused.restart is None:
        raise ValueError("call transition_and_restart first")
    pt = fused.transition.T.tocsr()
    alpha = fused.alpha
    restart = fused.restart
    r = restart.copy()
    history = [r.copy()] if record_history else None
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        new_r = (1.0 - alpha) * restart + alpha * (pt @ r)
        delta = float(np.abs(new_r - r).sum())
        r = new_r
        if record_history:
            history.append(r.copy())
        if delta < tol:
            converged = True
            break
    return RankScores(r=r, iterations=iters, converged=converged, history=history)


def closed_form_rank(fused: FusedGraph) -> RankScores:
    """Direct solve r* = (1-alpha) (I - alpha P^T)^-1 restart, for small graphs."""
    if fused.transition is None or fused.restart is None:
        raise ValueError("call transition_and_restart first")
    nv = len(fused.vertices)
    a = np.eye(nv) - fused.alpha * fused.transition.toarray().T
    r = np.linalg.solve(a, (1.0 - fused.alpha) * fused.restart)
    r = r / r.sum()
    return RankScores(r=r, iterations=0, converged=True)


def qsrf_search(
    index,
    query_views: Sequence[np.ndarray],
    params: QsrfParams = QsrfParams(),
) -> QsrfResult:
    """Fused reranking over all tables of a multi-view index.

    Runs the per-table weighted ranking, builds each table's candidate graph,
    superposes them, and ranks by the restart walk's visiting probabilities.
    The query vertex is dropped; ties on score break by ascending id.
    """
    tables = index.tables
    if len(query_views) != len(tables):
        raise ValueError(f"query has {len(query_views)} views, index has {len(tables)}")
    graphs = []
    per_table = []
    for m, (table, qv) in enumerate(zip(tables, query_views)):
        res = qrank_query(table, qv, params.query, top_n=params.top_n)
        per_table.append(res)
        graphs.append(build_candidate_graph(table, m, res))
    fused = fuse(graphs)
    fused = transition_and_restart(fused, alpha=params.alpha, restart_mass=params.restart_mass)
    walk = random_walk(fused, tol=params.walk_tol, max_iters=params.walk_max_iters)
    keep = fused.vertices != QUERY_VERTEX
    ids = fused.vertices[keep]
    scores = walk.r[keep]
    order = np.lexsort((ids, -scores))
    return QsrfResult(ids=ids[order], scores=scores[order], per_table=per_table,
                      fused=fused, walk=walk)
