"""Command-line entry point: clusterrank {prepare,build,train,query,bench,inspect}."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import _binio, dataio, pipeline
from .errors import ClusterRankError, ConfigError
from .index import RVQ, TwoLevelIndex
from .linalg import PcaModel, pca_transform
from .pqcodec import PqCodec, PqCodeStore
from .quantizer import Codebook
from .ranker import MlpModel
from .search import SCHEME_MODE, SearchConfig, search

log = logging.getLogger("clusterrank")


def load_config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.from_file(args.config) if args.config else pipeline.RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.workdir:
        overrides["workdir"] = args.workdir
    return cfg.replace(**overrides)


def _report(stage: str, did_work: bool, cfg) -> None:
    if did_work:
        print(f"{stage}: wrote artifacts to {cfg.workdir}")
    else:
        print(f"{stage}: up-to-date (use --force to rebuild)")


def cmd_prepare(cfg, args) -> int:
    _report("prepare", pipeline.prepare(cfg, args.force), cfg)
    return 0


def cmd_build(cfg, args) -> int:
    _report("build", pipeline.build(cfg, args.force), cfg)
    return 0


def cmd_train(cfg, args) -> int:
    losses = pipeline.train(cfg, args.force)
    if not losses:
        _report("train", False, cfg)
    for name, loss in losses.items():
        print(f"{name}\tfinal_loss={loss:.6f}")
    return 0


def _query_vectors(cfg, args) -> tuple[np.ndarray, np.ndarray]:
    if args.vectors:
        orig = pipeline._read_vectors(args.vectors).data
        pca = PcaModel.load(cfg.path("pca.bin"))
        if orig.shape[1] != pca.dim:
            raise ConfigError(f"query dim {orig.shape[1]} does not match the prepared data ({pca.dim})")
        return orig, pca_transform(pca, orig)
    orig = dataio.read_fvecs(cfg.path("query.fvecs")).data
    proj = dataio.read_fvecs(cfg.path("query_pca.fvecs")).data
    ids = args.id if args.id else [0]
    for i in ids:
        if not 0 <= i < orig.shape[0]:
            raise ConfigError(f"query id {i} outside [0, {orig.shape[0]})")
    return orig[ids], proj[ids]


def cmd_query(cfg, args) -> int:
    art = pipeline.load_artifacts(cfg)
    sc = SearchConfig(cfg.scheme, cfg.gamma, cfg.hier, cfg.R, cfg.T or None, cfg.k, cfg.cap or None)
    sc.validate(art.index)
    orig, proj = _query_vectors(cfg, args)
    ids = args.id if (args.id and not args.vectors) else list(range(orig.shape[0]))
    print("query\trank\tid\tdistance")
    for qid, qo, qp in zip(ids, orig, proj):
        truth = None
        if cfg.scheme == "ideal":
            if args.vectors:
                raise ConfigError("the ideal scheme needs ground truth; query by id instead")
            truth = art.truth[qid]
        res = search(qp, qo, sc, art.index, art.models, art.codec, art.codes, truth_row=truth)
        for rank, (i, d) in enumerate(res.hits):
            print(f"{qid}\t{rank}\t{i}\t{d:.6f}")
        st = res.stats
        print(f"# query {qid}: clusters={st.clusters_visited} subclusters={st.subclusters_visited} "
              f"candidates={st.candidates_scanned} ms={st.wall_time * 1e3:.3f}", file=sys.stderr)
    return 0


def cmd_bench(cfg, args) -> int:
    report, out = pipeline.bench(cfg, args.workers)
    for f in report.failures:
        print(f"cell failed: {f}", file=sys.stderr)
    print(f"bench: {len(report.rows)} rows -> {out}")
    return 0


# -- inspect -----------------------------------------------------------------

def _describe(path: Path) -> str:
    buf = _binio.read_file(path)
    magic = bytes(buf[:4])
    if magic == b"LIX1":
        ix = TwoLevelIndex.from_bytes(buf, str(path))
        second = f"N={ix.N}" if ix.kind == RVQ else f"alpha={ix.second.alpha} beta={ix.second.beta}"
        return f"index kind={ix.kind} dim={ix.dim} M={ix.M} {second} count={ix.count} lists={ix.keys.size}"
    if magic == b"PCA1":
        p = PcaModel.from_bytes(buf, str(path))
        return f"pca dim={p.dim} out_dim={p.out_dim}"
    if magic == b"CBK1":
        c = Codebook.from_bytes(buf, str(path))
        return f"codebook k={c.k} dim={c.dim}"
    if magic == b"PQB1":
        c = PqCodec.from_bytes(buf, str(path))
        return f"pq codec segments={c.num_segments} k={c.seg_k} dim={c.dim}"
    if magic == b"PQC1":
        s = PqCodeStore.from_bytes(buf, str(path))
        return f"pq codes count={s.count} bytes/code={s.codes.shape[1]}"
    if magic == b"MLP1":
        m = MlpModel.from_bytes(buf, str(path))
        return f"mlp mode={m.mode} layers={'-'.join(map(str, m.layer_sizes))} params={m.num_params}"
    if path.suffix in (".fvecs", ".bvecs"):
        d = pipeline._read_vectors(str(path))
        return f"vectors count={d.count} dim={d.dim} kind={d.element_kind}"
    if path.suffix == ".ivecs":
        a = dataio.read_ivecs(path)
        return f"ground truth queries={a.shape[0]} k={a.shape[1]}"
    return "unrecognised file"


def memory_accounting(cfg) -> dict:
    """Formula and on-disk sizes of the index structure plus the networks the configured scheme uses.

    Identities (4 bytes/point) and PQ codes are excluded from both sides.
    """
    ix = TwoLevelIndex.load(cfg.path("index.lix"))
    M, N, dim = ix.M, ix.N, ix.dim
    if ix.kind == RVQ:
        table = 8 * M * N
        codebooks = 4 * (M + N) * dim
    else:
        table = 16 * ix.keys.size + 8
        codebooks = 4 * (M * dim + dim * dim + ix.second.alpha * ix.second.beta * ix.second.sub_dim)
    names = []
    mode = SCHEME_MODE.get(cfg.scheme)
    if mode and cfg.path(f"f_{mode}.mlp").is_file():
        names.append(f"f_{mode}.mlp")
    if cfg.hier and cfg.path("h.mlp").is_file():
        names.append("h.mlp")
    params = sum(MlpModel.load(cfg.path(n)).num_params for n in names)
    formula = table + codebooks + 4 * params
    actual = cfg.path("index.lix").stat().st_size - 4 * ix.count + sum(cfg.path(n).stat().st_size for n in names)
    return {"count": ix.count, "table": table, "codebooks": codebooks, "networks": 4 * params,
            "models": names, "formula": formula, "actual": actual,
            "per_point": actual / ix.count, "ratio": actual / formula}


def cmd_inspect(cfg, args) -> int:
    paths = [Path(p) for p in args.paths] if args.paths else sorted(
        p for p in cfg.wd.glob("*") if p.is_file() and not p.name.startswith(".") and p.suffix != ".csv")
    if not paths:
        raise ConfigError(f"nothing to inspect in {cfg.workdir}")
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"no such file: {p}")
        print(f"{p.name}\t{p.stat().st_size} bytes\t{_describe(p)}")
    if not args.paths and cfg.path("index.lix").is_file():
        acc = memory_accounting(cfg)
        print(f"memory: 8MN table {acc['table']} + codebooks {acc['codebooks']} + "
              f"4*network params {acc['networks']} ({', '.join(acc['models']) or 'no models'}) "
              f"= {acc['formula']} bytes")
        print(f"memory: on disk excluding identities {acc['actual']} bytes "
              f"({acc['ratio']:.3f} x formula), {acc['per_point']:.2f} bytes/point over {acc['count']} points")
    return 0


COMMANDS = {"prepare": cmd_prepare, "build": cmd_build, "train": cmd_train,
            "query": cmd_query, "bench": cmd_bench, "inspect": cmd_inspect}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clusterrank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        sp.add_argument("-w", "--workdir")
        if name in ("prepare", "build", "train"):
            sp.add_argument("--force", action="store_true", help="rebuild even if up to date")
        if name == "query":
            sp.add_argument("--id", type=int, action="append", help="query-set row (repeatable)")
            sp.add_argument("--vectors", help=".fvecs/.bvecs file of original-space queries")
        if name == "bench":
            sp.add_argument("--workers", type=int, default=None)
        if name == "inspect":
            sp.add_argument("paths", nargs="*")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ClusterRankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, ArithmeticError) as exc:
        # ParameterError / NumericError subclass these and carry their own code
        code = getattr(exc, "exit_code", 3 if isinstance(exc, ArithmeticError) else 1)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
