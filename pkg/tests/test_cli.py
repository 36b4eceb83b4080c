import csv
import json

import numpy as np
import pytest

from niert.cli import main
from niert.model import forward, init_params, load_checkpoint
from niert.rng import RngStream
from niert.taskgen import read_dataset


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tasks.jsonl"
    assert run(["gen", "--family", "gaussian", "--dx", "1", "--count", "6",
                "--points", "24", "--n-min", "4", "--n-max", "8",
                "--sigma-base", "0.5", "--seed", "3", "--out", path]) == 0
    return path


@pytest.fixture(scope="module")
def small_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.niert"
    assert run(["train", "--family", "gaussian", "--dx", "1",
                "--sigma-base", "0.5", "--points", "24", "--n-min", "4",
                "--n-max", "8", "--layers", "2", "--d-model", "16",
                "--heads", "2", "--epochs", "1", "--batch-size", "4",
                "--tasks-per-epoch", "8", "--lr", "1e-3", "--seed", "5",
                "--out", path]) == 0
    return path


class TestGen:
    def test_deterministic_output(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            p = tmp_path / f"{name}.jsonl"
            assert run(["gen", "--family", "gaussian", "--dx", "10",
                        "--count", "8", "--seed", "7", "--out", p]) == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]

    def test_expr_paper_defaults(self, tmp_path):
        p = tmp_path / "expr.jsonl"
        assert run(["gen", "--family", "expr", "--dx", "1", "--count", "20",
                    "--seed", "1", "--out", p]) == 0
        for task in read_dataset(p):
            assert task.n + task.m == 256
            assert 5 <= task.n <= 50

    def test_invalid_family_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as err:
            run(["gen", "--family", "spline", "--out", tmp_path / "x.jsonl"])
        assert err.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unwritable_output_exits_3(self, tmp_path):
        assert run(["gen", "--family", "gaussian", "--dx", "10", "--count", "1",
                    "--out", tmp_path / "missing_dir" / "x.jsonl"]) == 3


class TestTrainCmd:
    def test_zero_epochs_checkpoint_equals_initialization(self, tmp_path):
        p = tmp_path / "init.niert"
        assert run(["train", "--family", "gaussian", "--dx", "1",
                    "--sigma-base", "0.5", "--layers", "2", "--d-model", "16",
                    "--heads", "2", "--epochs", "0", "--seed", "11",
                    "--out", p]) == 0
        config, params, _ = load_checkpoint(p)
        reference = init_params(config, RngStream(11))
        for k in params:
            assert np.array_equal(params[k].value, reference[k].value)

    def test_flags_recorded_in_report(self, tmp_path):
        p = tmp_path / "m.niert"
        assert run(["train", "--family", "gaussian", "--dx", "1",
                    "--sigma-base", "0.5", "--points", "24", "--n-min", "4",
                    "--n-max", "8", "--layers", "2", "--d-model", "16",
                    "--heads", "2", "--epochs", "1", "--batch-size", "4",
                    "--tasks-per-epoch", "4", "--loss-targets-only",
                    "--seed", "1", "--out", p]) == 0
        report = json.loads((tmp_path / "m.niert.report.json").read_text())
        assert report["metadata"]["loss_targets_only"] is True

    def test_epoch_losses_streamed_as_csv(self, tmp_path, capsys):
        p = tmp_path / "m.niert"
        assert run(["train", "--family", "gaussian", "--dx", "1",
                    "--sigma-base", "0.5", "--points", "24", "--n-min", "4",
                    "--n-max", "8", "--layers", "2", "--d-model", "16",
                    "--heads", "2", "--epochs", "2", "--batch-size", "4",
                    "--tasks-per-epoch", "4", "--seed", "1", "--out", p]) == 0
        lines = [l for l in capsys.readouterr().err.splitlines() if l]
        assert len(lines) == 2
        for i, line in enumerate(lines):
            epoch, value = line.split(",")
            assert int(epoch) == i + 1
            float(value)

    def test_config_file_with_unknown_key_exits_5(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert run(["train", "--config", cfg, "--epochs", "0",
                    "--out", tmp_path / "m.niert"]) == 5

    def test_config_file_values_used_and_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "model": {"num_layers": 2, "d_model": 16, "num_heads": 2},
            "train": {"epochs": 7, "batch_size": 4, "tasks_per_epoch": 4},
            "data": {"family": "gaussian", "d_x": 1, "sigma_base": 0.5,
                     "num_points": 24, "n_min": 4, "n_max": 8}}))
        p = tmp_path / "m.niert"
        assert run(["train", "--config", cfg, "--epochs", "1", "--seed", "2",
                    "--out", p]) == 0
        echoed = capsys.readouterr().out.splitlines()[0]
        effective = json.loads(echoed.removeprefix("config: "))
        assert effective["train"]["epochs"] == 1          # flag wins
        assert effective["train"]["batch_size"] == 4      # config wins
        assert effective["model"]["d_model"] == 16


class TestEvalCmd:
    def test_oracle_mode_all_zero(self, small_checkpoint, small_dataset, tmp_path):
        out = tmp_path / "metrics.csv"
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--oracle", "--out", out]) == 0
        rows = {(r["metric"], r["bin"]): r["value"]
                for r in csv.DictReader(out.open())}
        assert float(rows[("mse_target", "all")]) == 0.0
        assert float(rows[("mae_target", "all")]) == 0.0

    def test_metrics_rederivable_from_prediction_dump(self, small_checkpoint,
                                                      small_dataset, tmp_path):
        out = tmp_path / "metrics.csv"
        dump = tmp_path / "preds.jsonl"
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--dump-predictions", dump, "--out", out]) == 0
        per_task = []
        with dump.open() as fh:
            fh.readline()
            for line in fh:
                rec = json.loads(line)
                err = np.asarray(rec["target_pred"]) - np.asarray(rec["target_truth"])
                per_task.append(np.mean(err ** 2))
        rows = {(r["metric"], r["bin"]): r["value"]
                for r in csv.DictReader(out.open())}
        assert float(rows[("mse_target", "all")]) == pytest.approx(
            np.mean(per_task), rel=1e-12)

    def test_single_bin_for_fixed_n(self, small_checkpoint, tmp_path):
        data = tmp_path / "fixed.jsonl"
        assert run(["gen", "--family", "gaussian", "--dx", "1", "--count", "4",
                    "--points", "24", "--n-min", "10", "--n-max", "10",
                    "--sigma-base", "0.5", "--seed", "9", "--out", data]) == 0
        out = tmp_path / "m.csv"
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset", data,
                    "--out", out]) == 0
        bins = {r["bin"] for r in csv.DictReader(out.open())} - {"all", ""}
        assert bins == {"10-19"}

    def test_dim_mismatch_exits_5(self, small_checkpoint, tmp_path):
        data = tmp_path / "d10.jsonl"
        assert run(["gen", "--family", "gaussian", "--dx", "10", "--count", "1",
                    "--seed", "1", "--out", data]) == 0
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset", data,
                    "--out", tmp_path / "m.csv"]) == 5

    def test_missing_dataset_file_exits_3(self, small_checkpoint, tmp_path):
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset",
                    tmp_path / "nope.jsonl", "--out", tmp_path / "m.csv"]) == 3


class TestPredictCmd:
    def test_dump_matches_in_process_forward(self, small_checkpoint,
                                             small_dataset, tmp_path):
        out = tmp_path / "preds.jsonl"
        assert run(["predict", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--out", out]) == 0
        config, params, _ = load_checkpoint(small_checkpoint)
        tasks = read_dataset(small_dataset)
        with out.open() as fh:
            fh.readline()
            for task, line in zip(tasks, fh):
                rec = json.loads(line)
                pred = forward(task, params, config).predictions.value
                assert np.allclose(rec["target_pred"], pred[task.n:], atol=0)


class TestAttnCmd:
    def test_export_matches_capture_and_rows_sum_to_one(self, small_checkpoint,
                                                        small_dataset, tmp_path):
        out = tmp_path / "attn.csv"
        assert run(["attn", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--layer", "1", "--head", "0",
                    "--out", out]) == 0
        config, params, _ = load_checkpoint(small_checkpoint)
        task = read_dataset(small_dataset)[0]
        amap = next(m for m in forward(task, params, config,
                                       capture_attention=True).attention
                    if m.layer == 1 and m.head == 0)
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == task.n + task.m
        for i, row in enumerate(rows):
            weights = np.array([float(row[f"w{j}"]) for j in range(task.n)])
            assert np.all(weights >= 0)
            assert abs(weights.sum() - 1.0) < 1e-6
            assert np.array_equal(weights, amap.weights[i])

    def test_layer_out_of_range_exits_5(self, small_checkpoint, small_dataset,
                                        tmp_path):
        assert run(["attn", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--layer", "9", "--head", "0",
                    "--out", tmp_path / "a.csv"]) == 5

    def test_single_observed_point_gives_unit_weights(self, small_checkpoint,
                                                      tmp_path):
        data = tmp_path / "n1.jsonl"
        assert run(["gen", "--family", "gaussian", "--dx", "1", "--count", "1",
                    "--points", "8", "--n-min", "1", "--n-max", "1",
                    "--sigma-base", "0.5", "--seed", "2", "--out", data]) == 0
        out = tmp_path / "attn.csv"
        assert run(["attn", "--checkpoint", small_checkpoint, "--dataset", data,
                    "--layer", "0", "--head", "0", "--out", out]) == 0
        for row in csv.DictReader(out.open()):
            assert float(row["w0"]) == 1.0


class TestBaselineCmd:
    def test_rbf_near_zero_on_nodes_as_targets(self, tmp_path):
        data = tmp_path / "nodes.jsonl"
        assert run(["gen", "--family", "gaussian", "--dx", "2", "--count", "3",
                    "--points", "20", "--n-min", "8", "--n-max", "8",
                    "--sigma-base", "0.5", "--seed", "4", "--out", data]) == 0
        # replace targets with the observed points themselves; write records
        # by hand since observed/target overlap fails dataset validation
        from niert.taskgen import _HEADER, InterpolationTask, task_to_record
        clones = [InterpolationTask(t.observed_x, t.observed_y,
                                    t.observed_x.copy(), t.observed_y.copy(),
                                    t.source_id)
                  for t in read_dataset(data)]
        nodes = tmp_path / "selfnodes.jsonl"
        with nodes.open("w") as fh:
            fh.write(json.dumps(_HEADER) + "\n")
            for t in clones:
                fh.write(json.dumps(task_to_record(t)) + "\n")
        out = tmp_path / "rbf.csv"
        assert run(["baseline", "--method", "rbf", "--dataset", nodes,
                    "--out", out]) == 0
        rows = {(r["metric"], r["bin"]): r["value"] for r in csv.DictReader(out.open())}
        assert float(rows[("mse_target", "all")]) < 1e-14

    def test_idw_matches_direct_formula_on_dump(self, small_dataset, tmp_path):
        out = tmp_path / "idw.csv"
        dump = tmp_path / "idw_preds.jsonl"
        assert run(["baseline", "--method", "idw", "--dataset", small_dataset,
                    "--power", "2", "--dump-predictions", dump, "--out", out]) == 0
        tasks = read_dataset(small_dataset)
        with dump.open() as fh:
            fh.readline()
            rec = json.loads(fh.readline())
        task = tasks[0]
        d2 = ((task.target_x[:, None, :] - task.observed_x[None, :, :]) ** 2).sum(2)
        w = 1.0 / d2
        expected = (w @ task.observed_y) / w.sum(axis=1, keepdims=True)
        assert np.allclose(rec["target_pred"], expected, atol=1e-12)

    def test_singular_system_without_ridge_exits_5(self, tmp_path):
        from niert.taskgen import InterpolationTask, write_dataset
        dup = InterpolationTask(
            observed_x=np.array([[0.1], [0.1]]),
            observed_y=np.array([[1.0], [2.0]]),
            target_x=np.array([[0.5]]), target_y=np.array([[1.5]]),
            source_id="dup")
        # bypass validate() duplicate check by writing records manually
        import json as _json
        path = tmp_path / "dup.jsonl"
        from niert.taskgen import _HEADER, task_to_record
        with path.open("w") as fh:
            fh.write(_json.dumps(_HEADER) + "\n")
            fh.write(_json.dumps(task_to_record(dup)) + "\n")
        assert run(["baseline", "--method", "rbf", "--dataset", path,
                    "--out", tmp_path / "o.csv"]) == 5
        assert run(["baseline", "--method", "rbf", "--dataset", path,
                    "--ridge", "1e-6", "--out", tmp_path / "o2.csv"]) == 0

    def test_missing_dataset_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run(["baseline", "--method", "rbf", "--out", tmp_path / "o.csv"])
        assert err.value.code == 2


def test_outputs_reproducible_across_reruns(small_checkpoint, small_dataset,
                                            tmp_path):
    files = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.csv"
        assert run(["eval", "--checkpoint", small_checkpoint, "--dataset",
                    small_dataset, "--out", out]) == 0
        files.append(out.read_bytes())
    assert files[0] == files[1]
