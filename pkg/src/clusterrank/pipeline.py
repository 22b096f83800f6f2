"""Run configuration and the on-disk prepare / build / train / bench stages."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, FormatError, ParameterError
from .evalbench import RECALL_KS, Artifacts, RecallReport, build_ground_truth, grid_cells, run_grid
from .index import RVQ, TwoLevelIndex, build_index
from .linalg import PcaModel, pca_fit, pca_transform
from .pqcodec import PqCodec, PqCodeStore, pq_encode, pq_fit
from .ranker import (FEATURE_MODES, SECOND, MlpModel, first_features, first_targets_batch, h_features,
                     mlp_train, nn_weights, second_training_rows)
from .search import Models

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    workdir: str = "run"
    seed: int = 0
    # dataset
    dataset: str = "synthetic"  # synthetic | files
    base: str = ""
    query: str = ""
    synth_modes: int = 64
    synth_per_mode: int = 1580
    synth_dim: int = 128
    synth_spread: float = 0.1
    synth_queries: int = 1000
    gt_k: int = 100
    # compressed indexing space
    pca_dim: int = 32
    pca_sample: int = 100000
    # index
    kind: str = RVQ
    M: int = 256
    N: int = 256
    alpha: int = 4
    beta: int = 16
    opq_iters: int = 10
    kmeans_iters: int = 25
    # reranking codec
    pq_segments: int = 16
    pq_k: int = 256
    pq_sample: int = 50000
    pq_iters: int = 15
    # ranker training
    train_size: int = 20000
    train_k: int = 100
    weight_regime: str = "top1"
    weight_topk: int = 10
    modes: tuple = FEATURE_MODES
    train_h: bool = True
    h_max_rows: int = 40000
    hidden: tuple = (512, 512)
    epochs: int = 300
    batch: int = 1000
    lr: float = 0.01
    h_lr: float = 0.0  # 0: same step as the f networks
    momentum: float = 0.9
    halve_every: int = 100
    # query
    scheme: str = "prob_qcs"
    gamma: str = "none"
    hier: bool = False
    R: int = 5
    T: int = 0  # 0: every subcluster of the R clusters
    k: int = 10
    cap: int = 0  # 0: unlimited
    # bench grid; T = R * s for each s in bench_per_cluster, plus fixed totals in bench_T
    bench_schemes: tuple = ("dist_qcd", "prob_raw", "prob_qcs", "prob_raw_qcs", "ideal")
    bench_gammas: tuple = ("none", "sum", "std", "exp")
    bench_hier: tuple = (False, True)
    bench_R: tuple = (1, 2, 3, 5, 10)
    bench_per_cluster: tuple = (256,)
    bench_T: tuple = ()
    bench_cap: int = 0
    bench_timing: bool = True
    report: str = "report.csv"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: _coerce(self, k, v) for k, v in overrides.items()})

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls().replace(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text, str(path))

    @property
    def wd(self) -> Path:
        return Path(self.workdir)

    def path(self, name: str) -> Path:
        return self.wd / name

    def component_seed(self, name: str) -> int:
        """Per-component seed derived from the single top-level seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def nn_weights(self, K: int) -> np.ndarray:
        return nn_weights(K, self.weight_regime, self.weight_topk)


_INT_TUPLES = ("hidden", "bench_R", "bench_per_cluster", "bench_T")


def _coerce(cfg: RunConfig, key: str, value):
    if key not in RunConfig.keys():
        raise ConfigError(f"unknown configuration key {key!r}")
    default = getattr(RunConfig(), key)
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    try:
        if isinstance(default, bool):
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], bool):
                return tuple(v.lower() in ("1", "true", "yes") for v in items)
            if key in _INT_TUPLES:
                return tuple(int(v) for v in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


# -- stamps ------------------------------------------------------------------

STAGE_KEYS = {
    "prepare": ("seed", "dataset", "base", "query", "synth_modes", "synth_per_mode", "synth_dim",
                "synth_spread", "synth_queries", "gt_k", "pca_dim", "pca_sample"),
    "build": ("kind", "M", "N", "alpha", "beta", "opq_iters", "kmeans_iters", "pq_segments", "pq_k", "pq_sample", "pq_iters"),
    "train": ("train_size", "train_k", "weight_regime", "weight_topk", "modes", "train_h", "h_max_rows",
              "hidden", "epochs", "batch", "lr", "h_lr", "momentum", "halve_every"),
}
STAGE_ORDER = ("prepare", "build", "train")


def _stamp(cfg: RunConfig, stage: str) -> str:
    keys = [k for s in STAGE_ORDER[:STAGE_ORDER.index(stage) + 1] for k in STAGE_KEYS[s]]
    blob = {k: getattr(cfg, k) for k in keys}
    for name in ("base", "query"):
        p = Path(getattr(cfg, name))
        if cfg.dataset == "files" and p.is_file():
            st = p.stat()
            blob[name + "_stat"] = [st.st_size, st.st_mtime_ns]
    return hashlib.sha256(json.dumps(blob, sort_keys=True, default=list).encode()).hexdigest()


def up_to_date(cfg: RunConfig, stage: str, outputs) -> bool:
    sp = cfg.path(f".{stage}.stamp")
    return sp.is_file() and sp.read_text() == _stamp(cfg, stage) and all(cfg.path(o).is_file() for o in outputs)


def _mark(cfg: RunConfig, stage: str) -> None:
    cfg.path(f".{stage}.stamp").write_text(_stamp(cfg, stage))


def _require(cfg: RunConfig, names, stage: str) -> None:
    missing = [n for n in names if not cfg.path(n).is_file()]
    if missing:
        raise ConfigError(f"missing {', '.join(missing)} in {cfg.workdir}; run '{stage}' first")


# -- stages ------------------------------------------------------------------

PREPARE_OUT = ("base.fvecs", "query.fvecs", "pca.bin", "base_pca.fvecs", "query_pca.fvecs", "gt.ivecs")
BUILD_OUT = ("index.lix", "pq_codec.bin", "pq_codes.bin")


def _read_vectors(path: str) -> dataio.VectorDataset:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    if p.suffix == ".bvecs":
        return dataio.read_bvecs(p)
    if p.suffix == ".fvecs":
        return dataio.read_fvecs(p)
    raise ConfigError(f"unsupported dataset extension {p.suffix!r} (use .fvecs or .bvecs)")


def prepare(cfg: RunConfig, force: bool = False) -> bool:
    """Write original and PCA-space datasets, the PCA model and query ground truth.

    Returns False when every artifact is already up to date.
    """
    if not force and up_to_date(cfg, "prepare", PREPARE_OUT):
        return False
    if cfg.dataset == "synthetic":
        if cfg.pca_dim > cfg.synth_dim:
            raise ParameterError(f"pca_dim={cfg.pca_dim} exceeds data dim {cfg.synth_dim}")
        data = dataio.gen_synthetic(cfg.synth_modes, cfg.synth_per_mode, cfg.synth_dim, cfg.synth_spread,
                                    cfg.component_seed("synthetic"))
        if cfg.synth_queries >= data.count:
            raise ParameterError("synth_queries must be smaller than the generated set")
        base, query = dataio.split(data, [data.count - cfg.synth_queries, cfg.synth_queries],
                                   cfg.component_seed("split"))
    elif cfg.dataset == "files":
        base, query = _read_vectors(cfg.base), _read_vectors(cfg.query)
        if base.dim != query.dim:
            raise FormatError(f"base dim {base.dim} != query dim {query.dim}")
        if cfg.pca_dim > base.dim:
            raise ParameterError(f"pca_dim={cfg.pca_dim} exceeds data dim {base.dim}")
    else:
        raise ConfigError(f"dataset must be 'synthetic' or 'files', got {cfg.dataset!r}")
    cfg.wd.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.component_seed("pca"))
    sample = base.data if base.count <= cfg.pca_sample else \
        base.data[np.sort(rng.choice(base.count, cfg.pca_sample, replace=False))]
    pca = pca_fit(sample, cfg.pca_dim)
    gt = build_ground_truth(base.data, query.data, cfg.gt_k)
    dataio.write_fvecs(base, cfg.path("base.fvecs"))
    dataio.write_fvecs(query, cfg.path("query.fvecs"))
    pca.save(cfg.path("pca.bin"))
    dataio.write_fvecs(pca_transform(pca, base.data), cfg.path("base_pca.fvecs"))
    dataio.write_fvecs(pca_transform(pca, query.data), cfg.path("query_pca.fvecs"))
    dataio.write_ivecs(gt.ids, cfg.path("gt.ivecs"))
    _mark(cfg, "prepare")
    return True


def build(cfg: RunConfig, force: bool = False) -> bool:
    _require(cfg, PREPARE_OUT, "prepare")
    if not force and up_to_date(cfg, "build", BUILD_OUT):
        return False
    ref_pca = dataio.read_fvecs(cfg.path("base_pca.fvecs"))
    base = dataio.read_fvecs(cfg.path("base.fvecs"))
    index = build_index(ref_pca.data, cfg.M, cfg.N, cfg.kind, cfg.component_seed("index"),
                        alpha=cfg.alpha, beta=cfg.beta, opq_iters=cfg.opq_iters, kmeans_iters=cfg.kmeans_iters)
    rng = np.random.default_rng(cfg.component_seed("pq_sample"))
    train = base.data if base.count <= cfg.pq_sample else \
        base.data[np.sort(rng.choice(base.count, cfg.pq_sample, replace=False))]
    codec = pq_fit(train, cfg.pq_segments, cfg.pq_k, cfg.component_seed("pq"), cfg.pq_iters)
    codes = pq_encode(codec, base.data)
    index.save(cfg.path("index.lix"))
    codec.save(cfg.path("pq_codec.bin"))
    codes.save(cfg.path("pq_codes.bin"))
    _mark(cfg, "build")
    return True


def model_files(cfg: RunConfig) -> list[str]:
    names = [f"f_{m}.mlp" for m in cfg.modes]
    if cfg.train_h and cfg.kind == RVQ:
        names.append("h.mlp")
    return names


def train(cfg: RunConfig, force: bool = False) -> dict:
    """Train f for every configured feature mode (and h for RVQ); returns final losses by file."""
    _require(cfg, PREPARE_OUT, "prepare")
    _require(cfg, BUILD_OUT, "build")
    outputs = model_files(cfg)
    if not force and up_to_date(cfg, "train", outputs):
        return {}
    for mode in cfg.modes:
        if mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {mode!r}")
    index = TwoLevelIndex.load(cfg.path("index.lix"))
    ref_pca = dataio.read_fvecs(cfg.path("base_pca.fvecs"))
    base = dataio.read_fvecs(cfg.path("base.fvecs"))
    size = min(cfg.train_size, ref_pca.count)
    sample = dataio.stratified_sample(ref_pca, index, size, cfg.component_seed("stratified"))
    # training points are reference points: drop each one from its own neighbor list
    gt = build_ground_truth(base.data, base.data[sample.ids], cfg.train_k, exclude=sample.ids)
    w = cfg.nn_weights(gt.k)
    targets = first_targets_batch(gt.ids, w, index.point_clusters(), index.cluster_sizes)
    final = {}
    log_lines = ["model,epoch,loss"]
    common = dict(hidden=cfg.hidden, epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr,
                  momentum=cfg.momentum, halve_every=cfg.halve_every)
    for mode in cfg.modes:
        feats = first_features(sample.data, mode, index.first)
        model, losses = mlp_train(feats, targets, seed=cfg.component_seed(f"f_{mode}"), mode=mode, **common)
        model.save(cfg.path(f"f_{mode}.mlp"))
        log_lines += [f"f_{mode},{e},{v:.6f}" for e, v in enumerate(losses)]
        final[f"f_{mode}.mlp"] = losses[-1] if losses else float("nan")
    if "h.mlp" in outputs:
        t_idx, m_idx, ytab = second_training_rows(gt.ids, w, index, cfg.h_max_rows, cfg.component_seed("h_rows"))
        if t_idx.size == 0:
            raise ParameterError("no usable second-level training rows")
        feats = h_features(sample.data[t_idx], index.first, m_idx)
        model, losses = mlp_train(feats, ytab, seed=cfg.component_seed("h"), mode=SECOND,
                                  **dict(common, lr=cfg.h_lr or cfg.lr))
        model.save(cfg.path("h.mlp"))
        log_lines += [f"h,{e},{v:.6f}" for e, v in enumerate(losses)]
        final["h.mlp"] = losses[-1] if losses else float("nan")
    cfg.path("train_log.csv").write_text("\n".join(log_lines) + "\n")
    _mark(cfg, "train")
    return final


def load_models(cfg: RunConfig) -> Models:
    models = Models()
    for mode in FEATURE_MODES:
        p = cfg.path(f"f_{mode}.mlp")
        if p.is_file():
            models.f[mode] = MlpModel.load(p)
    if cfg.path("h.mlp").is_file():
        models.h = MlpModel.load(cfg.path("h.mlp"))
    return models


def load_artifacts(cfg: RunConfig, queries=None) -> Artifacts:
    _require(cfg, PREPARE_OUT, "prepare")
    _require(cfg, BUILD_OUT, "build")
    index = TwoLevelIndex.load(cfg.path("index.lix"))
    codec = PqCodec.load(cfg.path("pq_codec.bin"))
    codes = PqCodeStore.load(cfg.path("pq_codes.bin"))
    codes.check(codec)
    if codes.count != index.count:
        raise FormatError(f"PQ store holds {codes.count} codes, index holds {index.count} points")
    q_orig = dataio.read_fvecs(cfg.path("query.fvecs")).data
    q_pca = dataio.read_fvecs(cfg.path("query_pca.fvecs")).data
    truth = dataio.read_ivecs(cfg.path("gt.ivecs"))
    return Artifacts(index, codec, codes.codes, load_models(cfg), q_pca, q_orig, truth, cfg.seed)


def bench(cfg: RunConfig, workers: int | None = None) -> tuple[RecallReport, Path]:
    art = load_artifacts(cfg)
    if art.truth.shape[1] < max(RECALL_KS):
        raise ConfigError(f"bench reports recall@{max(RECALL_KS)} but gt_k={art.truth.shape[1]}; "
                          f"set gt_k >= {max(RECALL_KS)} and rerun prepare")
    hier = tuple(h for h in cfg.bench_hier if not h or art.models.h is not None)
    cells = grid_cells(cfg.bench_schemes, cfg.bench_gammas, hier, cfg.bench_R, cfg.bench_per_cluster,
                       (cfg.bench_cap or None,), cfg.bench_T)
    report = run_grid([art], cells, workers, cfg.bench_timing,
                      descriptor=f"{cfg.dataset} M={cfg.M} N={cfg.N} kind={cfg.kind} seed={cfg.seed}")
    out = cfg.path(cfg.report)
    report.write(out)
    return report, out
