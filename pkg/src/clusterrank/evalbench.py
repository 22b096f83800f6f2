"""Ground truth, recall@A and ablation grids written as CSV reports."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import GroundTruth
from .errors import ParameterError
from .pqcodec import adc_table
from .ranker import nn_weights, predict_first
from .search import DIST_QCD, IDEAL, SCHEME_MODE, SearchConfig, search

CSV_HEADER = ["scheme", "gamma", "hier", "M", "N", "R", "T", "cap", "recall1", "recall10",
              "recall100", "ms_mean", "cand_mean", "seed"]
RECALL_KS = (1, 10, 100)


def topk_recall(result, truth_row, k: int) -> float:
    """|G_k ∩ A| / |G_k| where A is the retrieved candidate set."""
    truth_row = np.asarray(truth_row)
    if k < 1 or k > truth_row.size:
        raise ParameterError(f"k={k} exceeds ground-truth depth {truth_row.size}")
    cands = getattr(result, "candidates", result)
    return float(np.isin(truth_row[:k], cands).sum()) / k


def build_ground_truth(reference, queries, k: int = 1000, exclude=None, chunk: int = 128) -> GroundTruth:
    """Exact k-NN of every query by exhaustive scan (ascending, ties -> lower id).

    Distances are screened with a BLAS inner-product pass and the shortlist
    re-scored from explicit coordinate differences. ``exclude[i]`` (optional)
    is an identity dropped from query ``i``'s list, used when the queries are
    themselves reference points.
    """
    x = np.asarray(reference, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = x.shape[0]
    extra = 0 if exclude is None else 1
    k = min(k, n - extra)
    if k < 1:
        raise ParameterError("reference set too small for the requested depth")
    short = min(n, k + extra + 32)
    x_sq = (x ** 2).sum(axis=1)
    ids = np.empty((q.shape[0], k), dtype=np.int64)
    dists = np.empty((q.shape[0], k))
    for s in range(0, q.shape[0], chunk):
        qc = q[s:s + chunk]
        approx = x_sq[None, :] - 2.0 * qc @ x.T
        cand = np.argpartition(approx, short - 1, axis=1)[:, :short] if short < n else \
            np.broadcast_to(np.arange(n), (qc.shape[0], n))
        for i, row in enumerate(cand):
            exact = ((x[row] - qc[i]) ** 2).sum(axis=1)
            bound = np.partition(exact, k + extra - 1)[k + extra - 1]
            qq = qc[i] @ qc[i]
            outside = np.ones(n, dtype=bool)
            outside[row] = False
            # fall back to a full exact scan if the screen could have missed a contender
            if outside.any() and (approx[i][outside] + qq).min() <= bound + 1e-9 * (x_sq.max() + qq):
                row = np.arange(n)
                exact = ((x - qc[i]) ** 2).sum(axis=1)
            if exclude is not None:
                keep = row != exclude[s + i]
                row, exact = row[keep], exact[keep]
            order = np.lexsort((row, exact))[:k]
            ids[s + i] = row[order]
            dists[s + i] = exact[order]
    return GroundTruth(ids.astype(np.int32), dists)


@dataclass(frozen=True)
class Cell:
    scheme: str
    gamma: str
    hier: bool
    R: int
    T: int
    cap: int | None = None

    def config(self, k: int = 100) -> SearchConfig:
        return SearchConfig(self.scheme, self.gamma, self.hier, self.R, self.T, k, self.cap)


def grid_cells(schemes, gammas, hier_flags, Rs, per_cluster, caps=(None,), budgets=()) -> list[Cell]:
    """Expand a grid; T = R * s for every per-cluster budget s, plus every fixed total in ``budgets``.

    dist_qcd only runs without quantity estimation or a second-level network;
    ideal only without the network. Duplicate cells are dropped.
    """
    cells = []
    for scheme in schemes:
        for gamma in gammas:
            for hier in hier_flags:
                if scheme == DIST_QCD and (gamma != "none" or hier):
                    continue
                if scheme == IDEAL and hier:
                    continue
                totals = [(R, R * s) for s in per_cluster for R in Rs] + [(R, t) for t in budgets for R in Rs]
                for R, T in totals:
                    for cap in caps:
                        cells.append(Cell(scheme, gamma, bool(hier), int(R), int(T), cap))
    return list(dict.fromkeys(cells))


@dataclass
class Artifacts:
    """Everything a search needs for one (dataset, index config, seed) combination."""

    index: object
    codec: object
    codes: np.ndarray
    models: object
    query_index: np.ndarray
    query_orig: np.ndarray
    truth: np.ndarray
    seed: int = 0
    weights: np.ndarray | None = None
    _probs: dict = field(default_factory=dict, repr=False)
    _tables: np.ndarray | None = field(default=None, repr=False)

    def first_probs(self, scheme):
        mode = SCHEME_MODE.get(scheme)
        if mode is None or self.models is None or mode not in self.models.f:
            return None
        if mode not in self._probs:
            self._probs[mode] = predict_first(self.models.f[mode], self.query_index, mode, self.index.first)
        return self._probs[mode]

    def tables(self):
        if self._tables is None:
            self._tables = np.stack([adc_table(self.codec, q) for q in np.asarray(self.query_orig)])
        return self._tables


@dataclass
class RecallReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    descriptor: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in CSV_HEADER])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    @classmethod
    def read(cls, path) -> "RecallReport":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        for r in rows:
            for c in ("M", "N", "R", "T", "seed"):
                r[c] = int(r[c])
            r["cap"] = None if r["cap"] == "" else int(r["cap"])
            r["hier"] = r["hier"] == "1"
            for c in ("recall1", "recall10", "recall100", "ms_mean", "cand_mean"):
                r[c] = float(r[c])
        return cls(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_cell(art: Artifacts, cell: Cell, record_timing: bool = True) -> dict:
    index = art.index
    cfg = cell.config(k=max(RECALL_KS))
    probs = art.first_probs(cell.scheme)
    tables = art.tables()
    truth = np.asarray(art.truth)
    if truth.shape[1] < max(RECALL_KS):
        raise ParameterError(f"ground truth depth {truth.shape[1]} < {max(RECALL_KS)}")
    rec = np.zeros((len(art.query_index), len(RECALL_KS)))
    times = np.zeros(len(art.query_index))
    cands = np.zeros(len(art.query_index))
    for i, (qi, qo) in enumerate(zip(art.query_index, art.query_orig)):
        res = search(qi, qo, cfg, index, art.models, art.codec, art.codes,
                     truth_row=truth[i] if cell.scheme == IDEAL else None, weights=art.weights,
                     first_probs=None if probs is None else probs[i], table=tables[i])
        rec[i] = [topk_recall(res, truth[i], k) for k in RECALL_KS]
        times[i] = res.stats.wall_time
        cands[i] = res.stats.candidates_scanned
    return {"scheme": cell.scheme, "gamma": cell.gamma, "hier": cell.hier, "M": index.M, "N": index.N,
            "R": cell.R, "T": cell.T, "cap": cell.cap,
            "recall1": float(rec[:, 0].mean()), "recall10": float(rec[:, 1].mean()),
            "recall100": float(rec[:, 2].mean()),
            "ms_mean": float(times.mean() * 1e3) if record_timing else 0.0,
            "cand_mean": float(cands.mean()), "seed": art.seed}


def default_workers() -> int:
    return max(1, int(os.environ.get("CLUSTERRANK_WORKERS", "1")))


def run_grid(artifact_sets, cells, workers: int | None = None, record_timing: bool = True,
             descriptor: str = "") -> RecallReport:
    """Run every cell on every artifact set; failing cells are logged, the grid continues.

    With ``record_timing=False`` the ms_mean column is written as 0 so that
    reports are byte-reproducible.
    """
    workers = default_workers() if workers is None else workers
    jobs = [(art, cell) for art in artifact_sets for cell in cells]
    for art in artifact_sets:  # warm caches before fanning out
        art.tables()
        for scheme in {c.scheme for c in cells}:
            art.first_probs(scheme)

    def run(job):
        art, cell = job
        try:
            return run_cell(art, cell, record_timing), None
        except Exception as exc:  # a broken cell must not sink the grid
            return None, f"{cell}: {type(exc).__name__}: {exc}"

    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    report = RecallReport(descriptor=descriptor)
    for row, err in results:
        if err is None:
            report.rows.append(row)
        else:
            report.failures.append(err)
    report.elapsed = time.perf_counter() - t0
    return report


# -- audits ------------------------------------------------------------------

def _key(r, *drop):
    keep = [c for c in ("scheme", "gamma", "hier", "M", "N", "cap", "seed") if c not in drop]
    return tuple(r[c] for c in keep)


def monotone_violations(rows, metric: str = "recall1") -> list[str]:
    """Cells whose recall drops when R grows with the per-cluster budget T/R held fixed."""
    groups = {}
    for r in rows:
        groups.setdefault(_key(r) + (r["T"] / r["R"],), []).append(r)
    out = []
    for key, rs in groups.items():
        rs = sorted(rs, key=lambda r: r["R"])
        for a, b in zip(rs, rs[1:]):
            if b[metric] < a[metric]:
                out.append(f"{key}: R={a['R']} -> {b['R']}: {a[metric]:.4f} -> {b[metric]:.4f}")
    return out


def ideal_dominance_violations(rows, metric: str = "recall1") -> list[str]:
    """Cells where any scheme beats the ideal ranking at the same (M, N, seed, R, T, cap)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["M"], r["N"], r["seed"], r["R"], r["T"], r["cap"]), []).append(r)
    out = []
    for key, rs in groups.items():
        ideal = [r[metric] for r in rs if r["scheme"] == IDEAL]
        if not ideal:
            continue
        for r in rs:
            if r["scheme"] != IDEAL and r[metric] > min(ideal):
                out.append(f"{key}: {r['scheme']}/{r['gamma']}/hier={r['hier']} {r[metric]:.4f} > ideal {min(ideal):.4f}")
    return out


def paired(rows, a: dict, b: dict, metric: str = "recall1") -> list[tuple]:
    """(cell key, value under selector a, value under selector b) for cells present in both."""
    def pick(sel):
        return {(r["M"], r["N"], r["seed"], r["R"], r["T"], r["cap"]): r[metric]
                for r in rows if all(r[k] == v for k, v in sel.items())}
    pa, pb = pick(a), pick(b)
    return [(k, pa[k], pb[k]) for k in sorted(pa, key=str) if k in pb]


__all__ = ["Artifacts", "Cell", "RecallReport", "build_ground_truth", "grid_cells", "ideal_dominance_violations",
           "monotone_violations", "nn_weights", "paired", "run_cell", "run_grid", "topk_recall"]
