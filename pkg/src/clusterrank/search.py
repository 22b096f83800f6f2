"""Cluster ranking, candidate generation and ADC reranking for one query."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .allocator import GAMMAS, allocate, round_half_away
from .errors import ConfigError
from .index import RVQ
from .linalg import pairwise_sq
from .pqcodec import adc_distances, adc_table
from .ranker import nn_weights, predict_first, predict_second

DIST_QCD, PROB_RAW, PROB_QCS, PROB_RAW_QCS, IDEAL = "dist_qcd", "prob_raw", "prob_qcs", "prob_raw_qcs", "ideal"
SCHEMES = (DIST_QCD, PROB_RAW, PROB_QCS, PROB_RAW_QCS, IDEAL)
SCHEME_MODE = {PROB_RAW: "raw", PROB_QCS: "qcs", PROB_RAW_QCS: "raw_qcs"}


@dataclass(frozen=True)
class SearchConfig:
    scheme: str = PROB_RAW
    gamma: str = "none"
    hierarchical: bool = False
    R: int = 5
    T: int | None = None  # None: every non-empty subcluster of the R clusters
    k: int = 100
    candidate_cap: int | None = None

    def validate(self, index) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.gamma not in GAMMAS:
            raise ConfigError(f"unknown gamma {self.gamma!r}; expected one of {GAMMAS}")
        if not 1 <= self.R <= index.M:
            raise ConfigError(f"R={self.R} outside [1, M={index.M}]")
        if self.T is not None and self.T < 1:
            raise ConfigError(f"T must be positive, got {self.T}")
        if self.gamma != "none" and self.scheme == DIST_QCD:
            raise ConfigError("quantity estimation needs probabilities; use a prob_* or ideal scheme")
        if self.gamma != "none" and self.T is None:
            raise ConfigError("quantity estimation needs a budget T")
        if self.hierarchical and index.kind != RVQ:
            raise ConfigError("hierarchical second-level ranking is only supported for RVQ indexes")
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.candidate_cap is not None and self.candidate_cap < 0:
            raise ConfigError("candidate_cap must be non-negative")


@dataclass
class Models:
    """First-level networks keyed by feature mode, plus the optional shared second-level network."""

    f: dict = field(default_factory=dict)
    h: object = None


@dataclass
class SearchStats:
    clusters_visited: int = 0
    subclusters_visited: int = 0
    candidates_scanned: int = 0
    wall_time: float = 0.0


@dataclass
class SearchResult:
    ids: np.ndarray  # ascending by ADC distance, ties -> lower id
    distances: np.ndarray
    candidates: np.ndarray  # the retrieved set A, in scan order
    stats: SearchStats

    @property
    def hits(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.distances.tolist()))


def _ideal_weights(g, weights):
    if weights is not None:
        return np.asarray(weights, dtype=np.float64)[:g.size]
    # the first neighbor outweighs all others combined
    return nn_weights(g.size, high=max(100.0, float(g.size)))


def _truth_scores(truth_row, weights, labels, size):
    g = np.asarray(truth_row)
    return np.bincount(labels[g], weights=_ideal_weights(g, weights), minlength=size)


def _top(scores, R, largest):
    # stable sort: ties resolve to the lower id
    order = np.argsort(-scores if largest else scores, kind="stable")
    return order[:R]


def rank_first(q, config: SearchConfig, index, models: Models | None = None, truth_row=None,
               weights=None, first_probs=None):
    """Top-R first-level clusters and their scores (probabilities, or None for dist_qcd).

    ``first_probs`` may carry precomputed probabilities for this query.
    """
    scheme = config.scheme
    if scheme == DIST_QCD:
        d = pairwise_sq(np.asarray(q)[None], index.first.centroids)[0]
        return _top(d, config.R, largest=False), None
    if scheme == IDEAL:
        if truth_row is None:
            raise ConfigError("the ideal scheme needs the query's ground truth")
        score = _truth_scores(truth_row, weights, index.labels[0], index.M)
        p = score / score.sum()
        top = _top(p, config.R, largest=True)
        return top, p[top]
    mode = SCHEME_MODE[scheme]
    if first_probs is None:
        if models is None or mode not in models.f:
            raise ConfigError(f"scheme {scheme} needs a trained first-level model for feature mode {mode!r}")
        first_probs = predict_first(models.f[mode], q, mode, index.first)
    top = _top(first_probs, config.R, largest=True)
    return top, first_probs[top]


def quotas(config: SearchConfig, scores, N: int) -> np.ndarray:
    R = config.R
    if config.T is None:
        return np.full(R, N, dtype=np.int64)
    if config.gamma == "none":
        return np.full(R, min(N, int(round_half_away(config.T / R))), dtype=np.int64)
    return allocate(scores, config.gamma, config.T, N)


def select_second(q, config: SearchConfig, index, clusters, S, models: Models | None = None,
                  truth_row=None, weights=None) -> list[np.ndarray]:
    """Selected subcluster ids for every ranked cluster, each in selection order."""
    out = []
    if config.scheme == IDEAL:
        ms, ns = index.labels
        g = np.asarray(truth_row)
        w = _ideal_weights(g, weights)
        for m, s in zip(clusters, S):
            cand, d = index.second_distances(q, m)
            inside = ms[g] == m
            hit = np.zeros(index.N)
            np.add.at(hit, ns[g[inside]], w[inside])
            order = np.lexsort((d, -hit[cand]))  # GT weight first, then distance
            out.append(cand[order[:s]])
        return out
    if config.hierarchical:
        if models is None or models.h is None:
            raise ConfigError("hierarchical ranking needs a trained second-level model")
        probs = predict_second(models.h, q, index.first, np.asarray(clusters))
        for row, m, s in zip(probs, clusters, S):
            cand, _ = index.subclusters(m)
            order = np.argsort(-row[cand], kind="stable")
            out.append(cand[order[:s]])
        return out
    return [index.top_s_second_by_distance(q, m, s) for m, s in zip(clusters, S)]


def search(q_index, q_orig, config: SearchConfig, index, models: Models | None, codec, codes,
           truth_row=None, weights=None, first_probs=None, table=None) -> SearchResult:
    """Rank clusters, gather candidates from the selected subclusters, rerank them by ADC.

    ``codes`` is the reference PQ code matrix (or a PqCodeStore); ``truth_row``
    is only consulted by the ideal scheme. ``first_probs`` and ``table`` let
    batch drivers pass precomputed network outputs and ADC tables.
    """
    t0 = time.perf_counter()
    config.validate(index)
    codes = getattr(codes, "codes", codes)
    if codes.shape[0] != index.count:
        raise ConfigError(f"PQ store holds {codes.shape[0]} codes but the index holds {index.count} points")
    if np.shape(q_orig)[-1] != codec.dim or np.shape(q_index)[-1] != index.dim:
        raise ConfigError("query dimensions do not match the index / codec")
    q = np.asarray(q_index, dtype=np.float64)
    clusters, scores = rank_first(q, config, index, models, truth_row, weights, first_probs)
    S = quotas(config, scores, index.N)
    chosen = select_second(q, config, index, clusters, S, models, truth_row, weights)
    lists = [lst for m, ns in zip(clusters, chosen) if ns.size for lst in index.lists_of(m, ns)]
    cands = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, dtype=np.int64)
    if config.candidate_cap is not None:
        cands = cands[:config.candidate_cap]
    stats = SearchStats(int(clusters.size), int(sum(ns.size for ns in chosen)), int(cands.size))
    if cands.size:
        if table is None:
            table = adc_table(codec, q_orig)
        d = adc_distances(table, codes[cands])
        k = min(config.k, cands.size)
        part = np.argpartition(d, k - 1)[:k] if k < cands.size else np.arange(cands.size)
        # partition may split a tie at the k-th distance; pull every tied entry back in
        if k < cands.size:
            kth = d[part].max()
            part = np.flatnonzero(d <= kth)
        order = np.lexsort((cands[part], d[part]))[:k]
        ids, dists = cands[part][order], d[part][order]
    else:
        ids, dists = cands, np.zeros(0)
    stats.wall_time = time.perf_counter() - t0
    return SearchResult(ids, dists, cands, stats)


def brute_force(q, reference, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest rows of ``reference`` to ``q``; ascending distance, ties -> lower id."""
    d = pairwise_sq(np.asarray(q)[None], reference)[0]
    k = min(k, d.size)
    order = np.lexsort((np.arange(d.size), d))[:k]
    return order, d[order]
