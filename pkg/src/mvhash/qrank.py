"""Query-adaptive bit weighting over one hash table.

Offline, each table stores an independence matrix built from pairwise mutual
information between bits on the training split. Online, a query gets raw
per-bit weights from how well each bit preserves its anchor neighborhood,
calibration redistributes mass away from redundant bits via replicator
dynamics on the simplex, and the database is ranked by weighted Hamming
distance under the calibrated weights.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .anchors import AnchorModel, embed, query_neighbor_profile
from .hashing import HashModel, PackedCodes, encode_one, hamming_scan, unpack_bits

MAGIC_INDEP = b"MVHI"

MI_SMOOTHING = 0.25
WEIGHT_FLOOR = 1e-12


@dataclass
class IndependenceMatrix:
    """Symmetric B x B matrix a_ij = exp(-lambda * MI(bit_i, bit_j)), zero diagonal."""

    a: np.ndarray
    lam: float


@dataclass
class BitWeights:
    """Raw weights w, simplex variable pi, and calibrated weights w* = w o pi.

    calibrated is floored at 1e-12 so weighted distances stay a total
    preorder even when calibration drives some pi_k to zero.
    """

    raw: np.ndarray
    pi: np.ndarray
    calibrated: np.ndarray
    gamma: float


@dataclass
class QueryParams:
    """Online knobs for query-adaptive ranking."""

    gamma: float = 1.0
    n_landmarks: int = 25
    calib_tol: float = 1e-8
    calib_max_iters: int = 1000
    calibrate: bool = True


@dataclass
class HashTable:
    """One view's immutable search state."""

    name: str
    hash_model: HashModel
    codes: PackedCodes          # database codes, row-aligned with db_ids
    db_ids: np.ndarray          # global item id per code row, ascending
    anchor_model: AnchorModel
    independence: IndependenceMatrix


@dataclass
class CalibrationResult:
    pi: np.ndarray
    calibrated: np.ndarray
    objectives: list
    iterations: int
    converged: bool
    iterates: Optional[list] = None


@dataclass
class QRankResult:
    """Ranked output of one table: global ids with weighted distances."""

    ids: np.ndarray
    local_ids: np.ndarray
    distances: np.ndarray
    weights: BitWeights
    query_words: np.ndarray


def _mi_terms(p: np.ndarray, pi_m: np.ndarray, pj_m: np.ndarray) -> np.ndarray:
    return p * np.log(p / (pi_m * pj_m))


def _mi_from_counts(c11, c10, c01, c00, smoothing: float):
    """MI in nats from smoothed 2x2 counts; grouping keeps i<->j exactly symmetric."""
    t = c11 + c10 + c01 + c00 + 4.0 * smoothing
    p11 = (c11 + smoothing) / t
    p10 = (c10 + smoothing) / t
    p01 = (c01 + smoothing) / t
    p00 = (c00 + smoothing) / t
    pi1 = p11 + p10
    pi0 = p01 + p00
    pj1 = p11 + p01
    pj0 = p10 + p00
    return (
        _mi_terms(p11, pi1, pj1)
        + (_mi_terms(p10, pi1, pj0) + _mi_terms(p01, pi0, pj1))
        + _mi_terms(p00, pi0, pj0)
    )


def pairwise_mutual_information(bits01: np.ndarray, smoothing: float = MI_SMOOTHING) -> np.ndarray:
    """All-pairs MI matrix (B x B, nats) from an (n, B) 0/1 bit matrix."""
    y = np.asarray(bits01, dtype=np.float64)
    n = y.shape[0]
    c11 = y.T @ y
    ones = y.sum(axis=0)
    c10 = ones[:, None] - c11
    c01 = ones[None, :] - c11
    c00 = n - c11 - c10 - c01
    return _mi_from_counts(c11, c10, c01, c00, smoothing)


def mutual_information(codes: PackedCodes, i: int, j: int, smoothing: float = MI_SMOOTHING) -> float:
    """Empirical MI between bits i and j of the codes, from the 2x2 joint table."""
    bits = unpack_bits(codes).astype(np.float64)
    yi, yj = bits[:, i], bits[:, j]
    c11 = float(yi @ yj)
    c10 = float(yi.sum() - c11)
    c01 = float(yj.sum() - c11)
    c00 = float(len(yi) - c11 - c10 - c01)
    return float(_mi_from_counts(c11, c10, c01, c00, smoothing))


def independence_matrix(codes: PackedCodes, lam: float = 1.0, smoothing: float = MI_SMOOTHING) -> IndependenceMatrix:
    """exp(-lambda * MI) off the diagonal, 0 on it; computed once per table offline."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    mi = pairwise_mutual_information(unpack_bits(codes), smoothing)
    a = np.exp(-lam * mi)
    np.fill_diagonal(a, 0.0)
    return IndependenceMatrix(a=a, lam=lam)


def raw_weights(
    hash_model: HashModel,
    anchor_model: AnchorModel,
    query: np.ndarray,
    gamma: float = 1.0,
    n_landmarks: int = 25,
) -> np.ndarray:
    """Per-bit weights w_k = exp(gamma * sum_p s(q,p) h_k(q) h_k(p)).

    The profile p ranges over the query's top-L landmarks with similarity
    weights summing to 1; h values are +-1 read off the query's code and the
    stored anchor codes. gamma=0 is allowed and gives unit weights (the
    degenerate reduction to plain Hamming).
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if anchor_model.anchor_codes is None:
        raise ValueError("anchor model has no codes; attach the view's hash model first")
    z_q = embed(anchor_model, query)
    landmark_ids, profile = query_neighbor_profile(anchor_model, z_q, n_landmarks)
    q_bits = unpack_bits_row(encode_one(hash_model, np.asarray(query, np.float64)), hash_model.bits)
    a_bits = unpack_bits(anchor_model.anchor_codes)[landmark_ids]
    q_pm = 2.0 * q_bits - 1.0
    a_pm = 2.0 * a_bits.astype(np.float64) - 1.0
    agreement = q_pm * (profile @ a_pm)
    return np.exp(gamma * agreement)


def unpack_bits_row(words: np.ndarray, bits: int) -> np.ndarray:
    """Unpack one word row into its first `bits` 0/1 values as float64."""
    as_bytes = np.asarray(words, dtype=np.uint64).reshape(1, -1).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[0, :bits].astype(np.float64)


def calibrate(
    raw: np.ndarray,
    a: Union[IndependenceMatrix, np.ndarray],
    tol: float = 1e-8,
    max_iters: int = 1000,
    record_iterates: bool = False,
) -> CalibrationResult:
    """Replicator dynamics for pi maximizing pi^T M pi with M_ij = w_i a_ij w_j.

    Starts from the uniform simplex point and iterates
    pi <- (pi o M pi) / (pi^T M pi) until the l1 change drops below tol or
    max_iters is hit. Returns pi and the floored calibrated weights w o pi.
    An all-zero M yields the uniform pi with a warning.
    """
    w = np.asarray(raw, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("raw weights must be positive")
    amat = a.a if isinstance(a, IndependenceMatrix) else np.asarray(a, dtype=np.float64)
    b = len(w)
    m = amat * np.outer(w, w)
    pi = np.full(b, 1.0 / b)
    g = m @ pi
    obj = float(pi @ g)
    if obj == 0.0:
        warnings.warn("calibration objective is zero (all-zero M); keeping uniform pi", RuntimeWarning)
        calibrated = np.maximum(w * pi, WEIGHT_FLOOR)
        return CalibrationResult(pi=pi, calibrated=calibrated, objectives=[0.0],
                                 iterations=0, converged=True,
                                 iterates=[pi.copy()] if record_iterates else None)
    objectives = [obj]
    iterates = [pi.copy()] if record_iterates else None
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        new_pi = pi * g / obj
        delta = float(np.abs(new_pi - pi).sum())
        pi = new_pi
        g = m @ pi
        obj = float(pi @ g)
        objectives.append(obj)
        if record_iterates:
            iterates.append(pi.copy())
        if delta < tol:
            converged = True
            break
        if obj == 0.0:
            break
    calibrated = np.maximum(w * pi, WEIGHT_FLOOR)
    return CalibrationResult(pi=pi, calibrated=calibrated, objectives=objectives,
                             iterations=iters, converged=converged, iterates=iterates)


def weighted_hamming(codes: PackedCodes, i: int, query_words: np.ndarray, wstar: np.ndarray) -> float:
    """Weighted Hamming distance of item i to the query: sum of w* over set XOR bits.

    Accumulated left to right in ascending bit order. That order is the
    distance's canonical semantics: float addition is not associative, and
    rankings must not depend on which code path produced the distance.
    """
    x = codes.words[i] ^ np.asarray(query_words, dtype=np.uint64)
    diff = unpack_bits_row(x, codes.bits)
    w = np.asarray(wstar, dtype=np.float64)
    total = 0.0
    for pos in np.flatnonzero(diff):
        total += float(w[pos])
    return total


def weighted_hamming_scan(
    codes: PackedCodes, query_words: np.ndarray, wstar: np.ndarray, chunk: int = 8192
) -> np.ndarray:
    """Weighted Hamming distance from the query to every item.

    Each distance is accumulated in ascending bit order (the canonical
    semantics of weighted_hamming); skipped bits contribute an exact +0.0,
    so the vectorized column accumulation matches the per-item definition
    bit for bit.
    """
    wstar = np.asarray(wstar, dtype=np.float64)
    q = np.asarray(query_words, dtype=np.uint64)
    out = np.empty(codes.n)
    for lo in range(0, codes.n, chunk):
        hi = min(lo + chunk, codes.n)
        x = codes.words[lo:hi] ^ q
        bits = np.unpackbits(x.view(np.uint8).reshape(hi - lo, -1), axis=1,
                             bitorder="little")[:, : codes.bits]
        acc = np.zeros(hi - lo)
        for pos in range(codes.bits):
            acc += np.where(bits[:, pos] != 0, wstar[pos], 0.0)
        out[lo:hi] = acc
    return out


def weighted_rank(codes: PackedCodes, query_words: np.ndarray, wstar: np.ndarray, k: int) -> np.ndarray:
    """Top-k ids by ascending weighted Hamming distance, ties by ascending id."""
    dist = weighted_hamming_scan(codes, query_words, wstar)
    order = np.argsort(dist, kind="stable")
    return order[:k]


def qrank_query(
    table: HashTable,
    query: np.ndarray,
    params: QueryParams = QueryParams(),
    top_n: int = 1000,
) -> QRankResult:
    """Full online pipeline for one table: weights, calibration, weighted scan.

    Returns the top_n database items sorted by ascending weighted distance
    (ties by ascending id), with global ids. With params.calibrate False the
    raw weights are used as-is, which with gamma=0 reduces exactly to plain
    Hamming ranking.
    """
    w = raw_weights(table.hash_model, table.anchor_model, query,
                    gamma=params.gamma, n_landmarks=params.n_landmarks)
    if params.calibrate:
        cal = calibrate(w, table.independence, tol=params.calib_tol,
                        max_iters=params.calib_max_iters)
        pi, wstar = cal.pi, cal.calibrated
    else:
        pi = np.full(len(w), 1.0 / len(w))
        wstar = w
    weights = BitWeights(raw=w, pi=pi, calibrated=wstar, gamma=params.gamma)
    query_words = encode_one(table.hash_model, np.asarray(query, np.float64))
    k = min(top_n, table.codes.n)
    dist = weighted_hamming_scan(table.codes, query_words, wstar)
    order = np.argsort(dist, kind="stable")[:k]
    return QRankResult(
        ids=table.db_ids[order],
        local_ids=order,
        distances=dist[order],
        weights=weights,
        query_words=query_words,
    )


def hamming_query(table: HashTable, query: np.ndarray, top_n: int = 1000):
    """Plain Hamming baseline over the same table; returns (global ids, distances)."""
    query_words = encode_one(table.hash_model, np.asarray(query, np.float64))
    dist = hamming_scan(table.codes, query_words)
    order = np.argsort(dist, kind="stable")[: min(top_n, table.codes.n)]
    return table.db_ids[order], dist[order]


def save_independence(path: Union[str, Path], indep: IndependenceMatrix) -> None:
    a = np.ascontiguousarray(indep.a, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_INDEP)
        fh.write(struct.pack("<IId", 1, a.shape[0], indep.lam))
        fh.write(a.tobytes())


def load_independence(path: Union[str, Path]) -> IndependenceMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_INDEP:
        raise ValueError(f"{path}: bad independence magic")
    ver, b, lam = struct.unpack("<IId", raw[4:20])
    if ver != 1:
        raise ValueError(f"{path}: unsupported independence version {ver}")
    a = np.frombuffer(raw, dtype="<f8", offset=20).reshape(b, b)
    return IndependenceMatrix(a=a.copy(), lam=lam)
