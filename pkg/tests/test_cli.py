import csv
import json
from pathlib import Path

import numpy as np
import pytest

from lrgwn import cli
from lrgwn.network import ModelConfig, init_params, save_checkpoint
from lrgwn.spectral import load_evd


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    out = Path(lines[-1]) if code == 0 else None
    return code, out, captured.out, captured.err


def read_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# config ")
    rows = list(csv.reader(lines[1:]))
    return rows[0], rows[1:]


@pytest.fixture
def p3(tmp_path):
    f = tmp_path / "p3.txt"
    f.write_text("0 1\n1 2\n")
    return f


class TestLaplacian:
    def test_p3_summary(self, capsys, tmp_path, p3):
        code, out, _, _ = run(capsys, "laplacian", "--graph", p3, "--out", tmp_path / "runs")
        assert code == 0
        doc = json.loads((out / "laplacian.json").read_text())
        assert (doc["n"], doc["m"], doc["nnz"]) == (3, 2, 7)
        assert doc["degree"] == {"min": 1, "max": 2, "mean": 4 / 3}
        assert doc["spectral_bound_ok"] is True
        assert doc["lambda_max_estimate"] == pytest.approx(2.0, abs=1e-12)
        assert doc["max_asymmetry"] == 0.0

    def test_malformed_line(self, capsys, tmp_path):
        f = tmp_path / "bad.txt"
        f.write_text("0 1\n1 two\n")
        code, _, _, err = run(capsys, "laplacian", "--graph", f, "--out", tmp_path)
        assert code == 2
        assert "line 2" in err

    def test_missing_graph_file(self, capsys, tmp_path):
        code, _, _, _ = run(capsys, "laplacian", "--graph", tmp_path / "nope.txt", "--out", tmp_path)
        assert code == 2

    def test_rerun_identical(self, capsys, tmp_path, p3):
        _, a, _, _ = run(capsys, "laplacian", "--graph", p3, "--out", tmp_path / "a")
        _, b, _, _ = run(capsys, "laplacian", "--graph", p3, "--out", tmp_path / "b")
        assert a.name == b.name
        assert (a / "laplacian.json").read_bytes() == (b / "laplacian.json").read_bytes()

    def test_env_output_root(self, capsys, tmp_path, p3, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env-root"))
        code, out, _, _ = run(capsys, "laplacian", "--graph", p3)
        assert code == 0
        assert out.parent == tmp_path / "env-root"
        assert out.name.startswith("laplacian-")


class TestEvd:
    def test_p3_k2(self, capsys, tmp_path, p3):
        code, out, stdout, _ = run(capsys, "evd", "--graph", p3, "--k", 2, "--out", tmp_path)
        assert code == 0
        evd = load_evd(out / "evd.json")
        np.testing.assert_allclose(evd.lambdas, [0.0, 1.0], atol=1e-12)
        assert "evd cache miss" in stdout
        header, rows = read_csv(out / "residuals.csv")
        assert header == ["index", "lambda", "residual_norm"]
        assert len(rows) == 2

    def test_cache_hit(self, capsys, tmp_path, p3):
        cache = tmp_path / "cache.json"
        run(capsys, "evd", "--graph", p3, "--k", 2, "--evd-cache", cache, "--out", tmp_path)
        code, out, stdout, _ = run(capsys, "evd", "--graph", p3, "--k", 2, "--evd-cache", cache,
                                   "--out", tmp_path / "second")
        assert code == 0
        assert "evd cache hit" in stdout
        assert (out / "evd.json").read_bytes() == cache.read_bytes()

    def test_k_exceeds_n(self, capsys, tmp_path, p3):
        code, _, _, err = run(capsys, "evd", "--graph", p3, "--k", 4, "--out", tmp_path)
        assert code == 2
        assert "k=4" in err

    def test_nonpositive_k(self, capsys, tmp_path, p3):
        code, _, _, _ = run(capsys, "evd", "--graph", p3, "--k", 0, "--out", tmp_path)
        assert code == 2


class TestFilterResponse:
    def test_identity_filter(self, capsys, tmp_path):
        f = tmp_path / "id.json"
        f.write_text(json.dumps({"rho": 1, "omega": [1.0, 0.0], "role": "scaling"}))
        code, out, _, _ = run(capsys, "filter-response", "--filter", f, "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "response.csv")
        col = header.index("response_channel_0")
        assert len(rows) == 201
        assert all(float(r[col]) == 1.0 for r in rows)

    def test_admissible_random_filter(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "filter-response", "--admissible", "--channels", 3, "--seed", 4,
                              "--lambda-cut", 1.0, "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "response.csv")
        cols = [i for i, h in enumerate(header) if h.startswith("response_channel")]
        assert len(cols) == 3
        assert float(rows[0][0]) == 0.0
        assert max(abs(float(rows[0][i])) for i in cols) <= 1e-12

    def test_beyond_cut_only_polynomial(self, capsys, tmp_path):
        cut = 0.8
        code, out, _, _ = run(capsys, "filter-response", "--lambda-cut", cut, "--seed", 2,
                              "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "response.csv")
        total, poly, spec = (header.index(h) for h in ("response_channel_0", "polynomial_part", "spectral_part"))
        beyond = [r for r in rows if float(r[0]) >= cut]
        below = [r for r in rows if float(r[0]) < cut]
        assert beyond and all(float(r[spec]) == 0.0 and float(r[total]) == float(r[poly]) for r in beyond)
        assert any(float(r[spec]) != 0.0 for r in below)

    def test_filter_written_back(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "filter-response", "--seed", 1, "--out", tmp_path)
        assert code == 0
        again = run(capsys, "filter-response", "--filter", out / "filter.json", "--out", tmp_path / "b")
        _, rows_a = read_csv(out / "response.csv")
        _, rows_b = read_csv(again[1] / "response.csv")
        assert rows_a == rows_b


class TestPropagate:
    def test_profiles(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "propagate", "--n-nodes", 60, "--rho", 3, "--k", 12, "--z", 12,
                              "--lambda-cut", 0.1, "--kernel-scale", 20, "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "propagation.csv")
        assert header == ["method", "hop", "energy"]
        by = {}
        for method, hop, e in rows:
            by.setdefault(method, {})[int(hop)] = float(e)
        assert set(by) == {"poly-3", "dense-evd", "hybrid"}
        assert all(e == 0.0 for h, e in by["poly-3"].items() if h >= 4)
        assert sum(e for h, e in by["dense-evd"].items() if h >= 4) > 0
        assert sum(e for h, e in by["hybrid"].items() if h >= 4) > 0

    def test_node_out_of_range(self, capsys, tmp_path):
        code, _, _, _ = run(capsys, "propagate", "--n-nodes", 10, "--k", 4, "--node", 10, "--out", tmp_path)
        assert code == 2


class TestFitCheb:
    def test_constant_kernel(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "fit-cheb", "--kernel", "constant", "--rhos", "1,5,20",
                              "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "fit.csv")
        assert header == ["rho", "sup_error"]
        assert [int(r[0]) for r in rows] == [1, 5, 20]
        assert all(float(r[1]) <= 1e-10 for r in rows)

    def test_mexican_hat_order(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "fit-cheb", "--kernel", "mexican-hat", "--kernel-scale", 8,
                              "--rhos", "20,50", "--out", tmp_path)
        assert code == 0
        _, rows = read_csv(out / "fit.csv")
        err = {int(r[0]): float(r[1]) for r in rows}
        assert err[50] < err[20]

    def test_grid_too_small(self, capsys, tmp_path):
        code, _, _, err = run(capsys, "fit-cheb", "--rhos", "10", "--grid-size", 20, "--out", tmp_path)
        assert code == 2
        assert "grid" in err


class TestTrain:
    def test_zero_epochs_keep_initialization(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "train", "--task", "local-degree", "--epochs", 0, "--d", 4,
                              "--out", tmp_path)
        assert code == 0
        doc = json.loads((out / "checkpoint.json").read_text())
        ref = tmp_path / "ref.json"
        save_checkpoint(init_params(ModelConfig.from_dict(doc["config"]), seed=0), ref)
        assert (out / "checkpoint.json").read_bytes() == ref.read_bytes()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["epochs_run"] == 0 and summary["val_loss"] is None

    def test_seeded_rerun(self, capsys, tmp_path):
        args = ["train", "--task", "local-degree", "--epochs", 3, "--d", 4, "--seed", 3]
        _, a, _, _ = run(capsys, *args, "--out", tmp_path / "a")
        _, b, _, _ = run(capsys, *args, "--out", tmp_path / "b")
        for name in ("trace.csv", "checkpoint.json", "summary.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        header, rows = read_csv(a / "trace.csv")
        assert header == ["epoch", "step", "train_loss", "val_loss", "val_metric", "lr"]
        assert len(rows) == 3

    def test_config_file_overridden_by_flags(self, capsys, tmp_path):
        conf = tmp_path / "run.json"
        conf.write_text(json.dumps({"epochs": 2, "d": 3, "task": "local-degree"}))
        code, out, _, _ = run(capsys, "train", "--config", conf, "--epochs", 1, "--out", tmp_path)
        assert code == 0
        used = json.loads((out / "config.json").read_text())
        assert (used["epochs"], used["d"]) == (1, 3)
        assert len(read_csv(out / "trace.csv")[1]) == 1

    def test_unknown_config_key(self, capsys, tmp_path):
        conf = tmp_path / "run.json"
        conf.write_text(json.dumps({"epochz": 2}))
        code, _, _, err = run(capsys, "train", "--config", conf, "--out", tmp_path)
        assert code == 2
        assert "epochz" in err

    def test_task_file(self, capsys, tmp_path):
        _, first, _, _ = run(capsys, "train", "--task", "local-degree", "--epochs", 1, "--d", 3,
                             "--out", tmp_path / "a")
        code, second, _, _ = run(capsys, "train", "--task", "local-degree", "--task-file",
                                 first / "task.json", "--epochs", 1, "--d", 3, "--out", tmp_path / "b")
        assert code == 0
        assert (first / "trace.csv").read_text().splitlines()[1:] == \
            (second / "trace.csv").read_text().splitlines()[1:]


class TestAblate:
    def test_small_matrix(self, capsys, tmp_path):
        code, out, _, _ = run(capsys, "ablate", "--task", "local-degree", "--epochs", 2, "--seeds", 2,
                              "--d", 3, "--out", tmp_path)
        assert code == 0
        header, rows = read_csv(out / "ablation.csv")
        assert header == ["variant", "seed", "best_epoch", "val_loss", "val_metric"]
        assert sorted({(r[0], int(r[1])) for r in rows}) == sorted(
            (v, s) for v in ("full", "no-spatial", "no-spectral") for s in (0, 1))
        summary = json.loads((out / "ablation-summary.json").read_text())
        assert set(summary["means"]) == {"full", "no-spatial", "no-spectral"}
        assert len(list(out.glob("trace-*.csv"))) == 6


class TestUsage:
    def test_bad_lambda_cut(self, capsys, tmp_path):
        code, _, _, _ = run(capsys, "filter-response", "--lambda-cut", 3.0, "--out", tmp_path)
        assert code == 2

    def test_unparsable_number(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fit-cheb", "--kernel-scale", "8,5", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_negative_rho(self, capsys, tmp_path):
        code, _, _, _ = run(capsys, "fit-cheb", "--rhos", "-1", "--out", tmp_path)
        assert code == 2

    def test_hash_names_directory(self, capsys, tmp_path, p3):
        _, a, _, _ = run(capsys, "laplacian", "--graph", p3, "--out", tmp_path)
        _, b, _, _ = run(capsys, "evd", "--graph", p3, "--k", 1, "--out", tmp_path)
        _, c, _, _ = run(capsys, "evd", "--graph", p3, "--k", 2, "--out", tmp_path)
        assert len({a, b, c}) == 3
        assert a.parent == b.parent == tmp_path
