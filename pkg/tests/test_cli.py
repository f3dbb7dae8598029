import numpy as np
import pytest

from slimnic import cli
from slimnic import codec as C
from slimnic import serialize as S

TINY = ["--data", "synthetic:1:4:32", "--holdout", "synthetic:2:2:32", "--batch-size", "2",
        "--patch-size", "32"]


def pipeline(out):
    out.mkdir(exist_ok=True)
    o = ["--out", str(out)]
    codes = [
        cli.run(["train", *o, *TINY, "--steps", "12", "--gamma", "0.1"]),
        cli.run(["prune", *o, "--model", str(out / "model.abcm"), "--inputs", "synthetic:3:2:32"]),
        cli.run(["eval", *o, "--model", str(out / "slim.abcm"), "--data", "synthetic:3:2:32"]),
        cli.run(["bench", *o, "--model", str(out / "slim.abcm"), "--baseline", str(out / "model.abcm"),
                 "--height", "32", "--width", "32", "--warmup", "1", "--rounds", "2", "--svg"]),
        cli.run(["search", *o, "--model", str(out / "model.abcm"), "--data", "synthetic:3:1:32",
                 "--threshold", "0.5,1", "--svg"]),
    ]
    return codes


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return base / "a", base / "b", pipeline(base / "a"), pipeline(base / "b")


def test_pipeline_exits_zero(two_runs):
    a, _, codes, _ = two_runs
    assert codes == [0, 0, 0, 0, 0]
    for name in ("model.abcm", "train.csv", "sparsity.csv", "plan.csv", "equivalence.csv",
                 "cost.csv", "cost_layers.csv", "slim.abcm", "eval.csv", "bench.csv",
                 "bench_cost.csv", "bench_flops.svg", "search.csv", "search.svg", "search_summary.csv"):
        assert (a / name).exists(), name


def test_reruns_are_byte_identical(two_runs):
    a, b, _, _ = two_runs
    for name in ("train.csv", "sparsity.csv", "plan.csv", "equivalence.csv", "cost.csv",
                 "cost_layers.csv", "eval.csv", "bench_cost.csv", "search.csv", "search_summary.csv",
                 "search.svg", "model.abcm", "slim.abcm"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_csv_headers_echo_config(two_runs):
    a = two_runs[0]
    lines = (a / "train.csv").read_text().splitlines()
    assert lines[0] == f"# slimnic {cli.__version__}"
    assert "# gamma = 0.1" in lines and "# data = synthetic:1:4:32" in lines
    assert not any(str(a) in ln for ln in lines)
    assert "# FLOP convention: multiply-add = 2 FLOPs" in (a / "cost.csv").read_text()


def test_equivalence_csv_records_pass(two_runs):
    text = (two_runs[0] / "equivalence.csv").read_text()
    assert "# passed = True" in text


def test_degenerate_prune_fails(tmp_path, capsys):
    model = C.build_model()
    model.slots["ga1"].param.data[:] = -1.0
    S.save_model(model, tmp_path / "dead.abcm")
    code = cli.run(["prune", "--out", str(tmp_path), "--model", str(tmp_path / "dead.abcm"),
                    "--inputs", "synthetic:3:1:32"])
    assert code != 0
    assert "ga1" in capsys.readouterr().err
    assert not (tmp_path / "slim.abcm").exists()


def test_missing_model_is_one_line_error(tmp_path, capsys):
    code = cli.run(["eval", "--out", str(tmp_path), "--model", str(tmp_path / "nope.abcm")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "not found" in err[0]


def test_eval_is_reproducible(tmp_path):
    S.save_model(C.build_model(seed=1), tmp_path / "m.abcm")
    for d in ("x", "y"):
        (tmp_path / d).mkdir()
        assert cli.run(["eval", "--out", str(tmp_path / d), "--model", str(tmp_path / "m.abcm"),
                        "--data", "synthetic:5:2:32"]) == 0
    assert (tmp_path / "x/eval.csv").read_bytes() == (tmp_path / "y/eval.csv").read_bytes()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nsteps = 5\nlmbda = 0.02\nbatch-size = 2\npatch_size = 32\n")
    argv = ["train", "--config", str(cfg), "--out", str(tmp_path), "--data", "synthetic:1:2:32",
            "--holdout", "synthetic:2:1:32"]
    args = cli.parse_args(argv + ["--steps", "3"])
    assert (args.steps, args.lmbda, args.batch_size) == (3, 0.02, 2)
    assert cli.run(argv + ["--steps", "3"]) == 0
    rows = [ln for ln in (tmp_path / "train.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 1 + 3


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stepz = 5\n")
    assert cli.run(["train", "--config", str(cfg)]) == 2
    assert "stepz" in capsys.readouterr().err


def test_unknown_flag_exits_two(capsys):
    assert cli.run(["train", "--bogus"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_sweep_subcommand(tmp_path):
    code = cli.run(["sweep", "--out", str(tmp_path), *TINY, "--steps", "3", "--gammas", "0,0.5"])
    assert code == 0
    rows = [ln for ln in (tmp_path / "sweep.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0].startswith("gamma,psnr,bpp,mean_sparsity,kept_ga0")
    assert len(rows) == 3
