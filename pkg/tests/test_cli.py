import csv
import io

import pytest

from clusterrank import dataio, pipeline
from clusterrank.cli import main, memory_accounting
from clusterrank.errors import ConfigError, ParameterError

TINY = """
# tiny end-to-end run
synth_modes = 6
synth_per_mode = 100
synth_dim = 12
synth_spread = 0.1
synth_queries = 30
gt_k = 100
pca_dim = 6
M = 8
N = 8
kmeans_iters = 10
pq_segments = 4
pq_k = 16
pq_iters = 8
train_size = 200
train_k = 20
hidden = 16, 16
epochs = 5
batch = 64
h_max_rows = 500
R = 3
k = 5
bench_schemes = dist_qcd, prob_raw, ideal
bench_gammas = none, std
bench_R = 1, 2, 4
bench_per_cluster = 2, 8
bench_timing = false
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = d / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def workdir(cfg_file):
    wd = cfg_file.parent / "run"
    for stage in ("prepare", "build", "train"):
        assert main([stage, "-c", str(cfg_file), "-w", str(wd)]) == 0
    return wd


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_config_parsing_and_overrides():
    cfg = pipeline.RunConfig.from_text("M = 16\nhidden = 8, 4\nhier = true\n# note\nscheme = dist_qcd")
    assert cfg.M == 16 and cfg.hidden == (8, 4) and cfg.hier is True and cfg.scheme == "dist_qcd"
    assert cfg.replace(bench_T="64,128").bench_T == (64, 128)
    assert cfg.replace(bench_hier="false").bench_hier == (False,)
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_text("not_a_key = 3")
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_text("M = many")
    with pytest.raises(ConfigError):
        pipeline.RunConfig.from_text("just words")


def test_component_seeds_differ_and_repeat():
    cfg = pipeline.RunConfig()
    assert cfg.component_seed("index") == cfg.component_seed("index")
    assert cfg.component_seed("index") != cfg.component_seed("pq")
    assert cfg.component_seed("index") != cfg.replace(seed=1).component_seed("index")


def test_stages_are_idempotent(workdir, cfg_file, capsys):
    for stage in ("prepare", "build", "train"):
        code, out, _ = run(capsys, stage, "-c", str(cfg_file), "-w", str(workdir))
        assert code == 0 and "up-to-date" in out


def test_changed_key_invalidates_later_stages(workdir, cfg_file, tmp_path):
    cfg = pipeline.RunConfig.from_file(cfg_file).replace(workdir=str(workdir))
    assert pipeline.up_to_date(cfg, "train", pipeline.model_files(cfg))
    assert not pipeline.up_to_date(cfg.replace(epochs=6), "train", pipeline.model_files(cfg))
    assert not pipeline.up_to_date(cfg.replace(h_lr=0.05), "train", pipeline.model_files(cfg))
    assert not pipeline.up_to_date(cfg.replace(M=4), "train", pipeline.model_files(cfg))
    assert pipeline.up_to_date(cfg.replace(M=4), "prepare", pipeline.PREPARE_OUT)


def test_retrain_is_deterministic(workdir, cfg_file):
    cfg = pipeline.RunConfig.from_file(cfg_file).replace(workdir=str(workdir))
    before = {n: cfg.path(n).read_bytes() for n in pipeline.model_files(cfg)}
    pipeline.train(cfg, force=True)
    assert before == {n: cfg.path(n).read_bytes() for n in pipeline.model_files(cfg)}


def test_pca_dim_too_large_fails_before_writing(tmp_path, cfg_file, capsys):
    wd = tmp_path / "bad"
    code, _, err = run(capsys, "prepare", "-c", str(cfg_file), "-w", str(wd), "--set", "pca_dim=40")
    assert code == ParameterError.exit_code and "pca_dim" in err
    assert not wd.exists()


def test_missing_artifacts_are_reported(tmp_path, cfg_file, capsys):
    code, _, err = run(capsys, "build", "-c", str(cfg_file), "-w", str(tmp_path / "empty"))
    assert code == 1 and "run 'prepare' first" in err


def test_bad_override_and_usage_exit_codes(cfg_file, capsys):
    assert run(capsys, "query", "-c", str(cfg_file), "--set", "nope=1")[0] == 1
    assert run(capsys, "query", "-c", str(cfg_file), "--set", "novalue")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1


def test_corrupt_index_exit_code(workdir, cfg_file, tmp_path, capsys):
    import shutil
    wd = tmp_path / "corrupt"
    shutil.copytree(workdir, wd)
    (wd / "index.lix").write_bytes(b"LIX1" + b"\0" * 7)
    code, _, err = run(capsys, "query", "-c", str(cfg_file), "-w", str(wd))
    assert code == 2 and err.startswith("error:")


def test_query_output_parses(workdir, cfg_file, capsys):
    code, out, err = run(capsys, "query", "-c", str(cfg_file), "-w", str(workdir), "--id", "0", "--id", "3")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out), delimiter="\t"))
    assert rows[0] == ["query", "rank", "id", "distance"]
    body = rows[1:]
    assert {r[0] for r in body} == {"0", "3"}
    for q in ("0", "3"):
        hits = [r for r in body if r[0] == q]
        assert [int(r[1]) for r in hits] == list(range(len(hits))) and 0 < len(hits) <= 5
        d = [float(r[3]) for r in hits]
        assert d == sorted(d)
    assert err.count("# query") == 2


def test_query_by_vectors_matches_query_by_id(workdir, cfg_file, tmp_path, capsys):
    q = dataio.read_fvecs(workdir / "query.fvecs")
    path = tmp_path / "q.fvecs"
    dataio.write_fvecs(dataio.VectorDataset(q.data[[2]]), path)
    _, by_vec, _ = run(capsys, "query", "-c", str(cfg_file), "-w", str(workdir), "--vectors", str(path))
    _, by_id, _ = run(capsys, "query", "-c", str(cfg_file), "-w", str(workdir), "--id", "2")
    strip = lambda out: [line.split("\t", 1)[1] for line in out.splitlines()[1:]]
    assert strip(by_vec) == strip(by_id)


def test_query_id_out_of_range(workdir, cfg_file, capsys):
    code, _, err = run(capsys, "query", "-c", str(cfg_file), "-w", str(workdir), "--id", "999")
    assert code == 1 and "outside" in err


def test_bench_writes_report_with_clean_audits(workdir, cfg_file, capsys):
    from clusterrank.evalbench import RecallReport, ideal_dominance_violations, monotone_violations
    code, out, _ = run(capsys, "bench", "-c", str(cfg_file), "-w", str(workdir))
    assert code == 0 and "rows" in out
    rep = RecallReport.read(workdir / "report.csv")
    assert {r["scheme"] for r in rep.rows} == {"dist_qcd", "prob_raw", "ideal"}
    assert not monotone_violations([r for r in rep.rows if r["gamma"] == "none"])
    assert not ideal_dominance_violations(rep.rows)


def test_bench_needs_deep_ground_truth(workdir, cfg_file, tmp_path, capsys):
    import shutil
    wd = tmp_path / "shallow"
    shutil.copytree(workdir, wd)
    gt = dataio.read_ivecs(wd / "gt.ivecs")
    dataio.write_ivecs(gt[:, :20], wd / "gt.ivecs")
    code, _, err = run(capsys, "bench", "-c", str(cfg_file), "-w", str(wd))
    assert code == 1 and "gt_k" in err


def test_bench_empty_grid_is_header_only(workdir, cfg_file, capsys):
    from clusterrank.evalbench import CSV_HEADER
    code, _, _ = run(capsys, "bench", "-c", str(cfg_file), "-w", str(workdir),
                     "--set", "bench_R=", "--set", "report=empty.csv")
    assert code == 0
    assert (workdir / "empty.csv").read_text().strip() == ",".join(CSV_HEADER)


def test_inspect_lists_artifacts_and_memory(workdir, cfg_file, capsys):
    code, out, _ = run(capsys, "inspect", "-c", str(cfg_file), "-w", str(workdir))
    assert code == 0
    names = {line.split("\t")[0] for line in out.splitlines() if "\t" in line}
    assert {"index.lix", "pq_codec.bin", "pq_codes.bin", "f_raw.mlp", "h.mlp", "gt.ivecs"} <= names
    assert "index kind=rvq" in out and "memory:" in out


def test_memory_accounting_matches_formula(workdir, cfg_file):
    cfg = pipeline.RunConfig.from_file(cfg_file).replace(workdir=str(workdir), scheme="prob_raw", hier=True)
    acc = memory_accounting(cfg)
    assert acc["models"] == ["f_raw.mlp", "h.mlp"]
    assert acc["table"] == 8 * 8 * 8
    # file headers are the only difference at this size
    assert 0 < acc["actual"] - acc["formula"] < 400


def test_inspect_missing_path(cfg_file, capsys, tmp_path):
    code, _, err = run(capsys, "inspect", "-c", str(cfg_file), str(tmp_path / "nope.bin"))
    assert code == 1 and "no such file" in err


def test_module_entry_point(workdir, cfg_file):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "clusterrank", "inspect", "-w", str(workdir),
                           str(workdir / "index.lix")], capture_output=True, text=True)
    assert proc.returncode == 0 and "index kind=rvq" in proc.stdout
