import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from adasum import cli
from adasum.errors import ProtocolError
from adasum.oracle import CSV_COLUMNS
from adasum.training.distributed import METRIC_COLUMNS

SMALL = ["--dataset", "gauss_blobs", "--n-samples", "2000", "--n-features", "4",
         "--model", "logistic", "--epochs", "0.5", "--batch-size", "10", "--max-lr", "0.1"]


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _train(tmp_path, name, *extra):
    out = tmp_path / name
    assert cli.main(["train", "--out-dir", str(out), "--ranks", "4", *SMALL, *extra]) == 0
    return out


def test_train_is_deterministic(tmp_path):
    a, b = _train(tmp_path, "a"), _train(tmp_path, "b")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert tuple(_rows(a / "metrics.csv")[0]) == METRIC_COLUMNS
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["content_hash"] == mb["content_hash"]
    assert ma["outputs"] == mb["outputs"]


def test_manifest_fields(tmp_path):
    m = json.loads((_train(tmp_path, "m") / "manifest.json").read_text())
    for key in ("command", "config", "seed", "content_hash", "started", "finished", "outputs"):
        assert key in m
    assert m["config"]["ranks"] == 4 and "out_dir" not in m["config"]
    assert m["outputs"]["metrics.csv"] == cli.content_hash((tmp_path / "m" / "metrics.csv").read_bytes())


def test_local_steps_cut_allreduce_calls(tmp_path):
    one = json.loads((_train(tmp_path, "l1") / "manifest.json").read_text())
    many = json.loads((_train(tmp_path, "l16", "--local-steps", "5") / "manifest.json").read_text())
    assert one["allreduce_calls"] == 5 * many["allreduce_calls"]


def test_content_hash_is_git_blob():
    assert cli.content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nranks = 2\nmax_lr=0.3\n")
    args = cli.parse_args(["train", "--config", str(cfg), "--max-lr", "0.2"])
    assert args.ranks == 2 and args.max_lr == 0.2
    cfg.write_text("no_such_key = 1\n")
    with pytest.raises(cli.UsageError):
        cli.parse_args(["train", "--config", str(cfg)])


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["train", "--ranks", "3", "--reduction", "adasum", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["nonsense"]) == 2
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--out-dir", str(tmp_path), "--ranks", "2", *SMALL, "--max-lr", "1e300"]) == 3

    def boom(args, argv):
        raise ProtocolError("tag mismatch")

    monkeypatch.setitem(cli.COMMANDS, "train", boom)
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == 4


def test_lemma_check(tmp_path):
    assert cli.main(["lemma-check", "--trials", "40", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "lemmas.csv")
    assert len(rows) > 30 and all(r[-1] == "0" for r in rows[1:])
    assert cli.main(["lemma-check", "--dims", "x", "--out-dir", str(tmp_path)]) == 2


def test_seq_error(tmp_path):
    assert cli.main(["seq-error", "--ranks", "4", "--steps", "3", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "error.csv")
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 4
    assert cli.main(["seq-error", "--ranks", "32", "--steps", "1", "--out-dir", str(tmp_path)]) == 2


def test_orthogonality(tmp_path):
    assert cli.main(["orthogonality", "--ranks", "4", *SMALL, "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "orth.csv")
    assert rows[0][:2] == ["step", "orthogonality_mean"] and len(rows) > 2
    vals = np.array([float(r[1]) for r in rows[1:]])
    assert np.all((vals >= 0) & (vals <= 1 + 1e-12))


def test_bench(tmp_path):
    assert cli.main(["bench", "--ranks", "4", "--min-log2-bytes", "10", "--max-log2-bytes", "12",
                     "--trials", "3", "--tensors", "8", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "bench.csv")
    assert rows[0] == ["bytes", "op", "median_s", "p95_s"]
    assert {r[1] for r in rows[1:]} == {"adasum_rvh", "sum_rvh"} and len(rows) == 7
    assert cli.main(["bench", "--min-log2-bytes", "12", "--max-log2-bytes", "10",
                     "--out-dir", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adasum", "lemma-check", "--trials", "5",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()
