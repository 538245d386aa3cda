import json

import numpy as np
import pytest

from engagerank import cli, featurepipe, harness


def run_cli(*argv):
    return cli.main(list(argv))


def synth_file(path, n=40, seed=0, speech_fraction=0.0):
    run_cli("synth", "--out", str(path), "--n", str(n), "--channels", "2",
            "--global-dim", "5", "--frames", "12", "--noise", "0.4",
            "--proportions", "1,1,1,1", "--seed", str(seed),
            "--speech-dim", "6",
            "--speech-fraction", str(speech_fraction))
    return str(path)


TINY_FLAGS = ("--batch-size", "8", "--pool-size", "16", "--epochs", "2",
              "--channels", "2", "--global-dim", "5", "--width", "4",
              "--n-chunks", "4", "--dropout", "0.0", "--speech-dim", "6",
              "--min-frames", "8")


class TestSynth:
    def test_writes_loadable_jsonl(self, tmp_path, capsys):
        path = synth_file(tmp_path / "data.jsonl")
        out = capsys.readouterr().out
        assert "wrote 40 records" in out
        data = featurepipe.load_records(path)
        assert len(data.records) == 40
        assert data.class_counts().tolist() == [10, 10, 10, 10]

    def test_saturation_flag_changes_features(self, tmp_path):
        run_cli("synth", "--out", str(tmp_path / "a.jsonl"), "--n", "8",
                "--channels", "2", "--global-dim", "5", "--frames", "12")
        run_cli("synth", "--out", str(tmp_path / "b.jsonl"), "--n", "8",
                "--channels", "2", "--global-dim", "5", "--frames", "12",
                "--saturation", "2.0")
        a = featurepipe.load_records(str(tmp_path / "a.jsonl"))
        b = featurepipe.load_records(str(tmp_path / "b.jsonl"))
        assert [r.label for r in a.records] == [r.label for r in b.records]
        assert np.any(a.records[0].global_feature != b.records[0].global_feature)

    def test_label_flip_flag_changes_labels_only(self, tmp_path):
        run_cli("synth", "--out", str(tmp_path / "a.jsonl"), "--n", "40",
                "--channels", "2", "--global-dim", "5", "--frames", "12")
        run_cli("synth", "--out", str(tmp_path / "b.jsonl"), "--n", "40",
                "--channels", "2", "--global-dim", "5", "--frames", "12",
                "--label-flip", "0.4")
        a = featurepipe.load_records(str(tmp_path / "a.jsonl"))
        b = featurepipe.load_records(str(tmp_path / "b.jsonl"))
        assert [r.label for r in a.records] != [r.label for r in b.records]
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.global_feature, rb.global_feature)


class TestTrainEval:
    def test_round_trip(self, tmp_path, capsys):
        train = synth_file(tmp_path / "train.jsonl", n=32)
        val = synth_file(tmp_path / "val.jsonl", n=16, seed=1)
        out_dir = tmp_path / "run"
        code = run_cli("train", "--train", train, "--val", val,
                       "--out-dir", str(out_dir), "--loss", "mocorank",
                       *TINY_FLAGS)
        assert code == 0
        assert (out_dir / "checkpoint.npz").exists()
        assert (out_dir / "metrics.json").exists()
        history = (out_dir / "history.csv").read_text().splitlines()
        assert history[0].startswith("epoch,stage,train_loss,lr")
        assert len(history) == 3

        capsys.readouterr()
        code = run_cli("eval", "--checkpoint", str(out_dir / "checkpoint.npz"),
                       "--data", val,
                       "--metrics-out", str(tmp_path / "m.json"),
                       "--recall-out", str(tmp_path / "r.csv"))
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert int(np.sum(report["confusion"])) == 16
        assert report["classes"][0] == "HIGHLY_DISENGAGED"
        assert report == json.loads((tmp_path / "m.json").read_text())
        recall = (tmp_path / "r.csv").read_text().splitlines()
        assert recall[0] == "class,model"
        assert len(recall) == 5

    def test_eval_metrics_match_library(self, tmp_path, capsys):
        train = synth_file(tmp_path / "train.jsonl", n=32)
        out_dir = tmp_path / "run"
        run_cli("train", "--train", train, "--out-dir", str(out_dir),
                "--loss", "mse", *TINY_FLAGS)
        capsys.readouterr()
        run_cli("eval", "--checkpoint", str(out_dir / "checkpoint.npz"),
                "--data", train)
        printed = json.loads(capsys.readouterr().out)
        state = harness.load_checkpoint(str(out_dir / "checkpoint.npz"))
        report = harness.evaluate(state, featurepipe.load_records(train))
        assert printed["acc"] == pytest.approx(report.acc)
        assert printed["confusion"] == report.confusion.tolist()

    def test_two_stage_command(self, tmp_path):
        train = synth_file(tmp_path / "train.jsonl", n=40, speech_fraction=0.5)
        out_dir = tmp_path / "run2"
        code = run_cli("train-two-stage", "--train", train,
                       "--out-dir", str(out_dir), "--loss", "mocorank",
                       "--stage2-epochs", "1", *TINY_FLAGS)
        assert code == 0
        state = harness.load_checkpoint(str(out_dir / "checkpoint.npz"))
        assert state.config.use_audio


class TestConfigFile:
    def test_file_supplies_flags_and_cli_overrides(self, tmp_path):
        train = synth_file(tmp_path / "train.jsonl", n=32)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "config_version": 1, "loss": "mse", "epochs": 2, "batch_size": 8,
            "pool_size": 16, "n_channels": 2, "global_dim": 5, "width": 4,
            "n_chunks": 4, "dropout": 0.0, "speech_dim": 6, "min_frames": 8,
            "seed": 7}))
        out_dir = tmp_path / "run"
        code = run_cli("train", "--train", train, "--out-dir", str(out_dir),
                       "--config", str(cfg_path), "--seed", "9")
        assert code == 0
        state = harness.load_checkpoint(str(out_dir / "checkpoint.npz"))
        assert state.config.loss == "mse"       # from the file
        assert state.config.epochs == 2         # from the file
        assert state.config.seed == 9           # flag wins over the file

    def test_preset_is_weakest_layer(self, tmp_path):
        args = cli.build_parser().parse_args(
            ["train", "--train", "x", "--out-dir", "y", "--preset", "desk",
             "--config", str(tmp_path / "cfg.json"), "--epochs", "3"])
        (tmp_path / "cfg.json").write_text(json.dumps(
            {"config_version": 1, "epochs": 10, "pool_size": 64}))
        config = cli.build_train_config(args)
        assert config.batch_size == 32    # desk preset
        assert config.pool_size == 64     # file beats preset
        assert config.epochs == 3         # flag beats file

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"config_version": 1, "learning_rate": 0.1}))
        with pytest.raises(ValueError, match="unknown keys.*learning_rate"):
            cli._load_config_file(str(bad))

    def test_version_checked(self, tmp_path):
        bad = tmp_path / "old.json"
        bad.write_text(json.dumps({"config_version": 0, "epochs": 5}))
        with pytest.raises(ValueError, match="config_version"):
            cli._load_config_file(str(bad))
        none = tmp_path / "none.json"
        none.write_text(json.dumps({"epochs": 5}))
        with pytest.raises(ValueError, match="config_version"):
            cli._load_config_file(str(none))

    def test_non_object_rejected(self, tmp_path):
        bad = tmp_path / "list.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ValueError, match="JSON object"):
            cli._load_config_file(str(bad))


class TestGradCheckCommand:
    def test_passing_run_exits_zero(self, capsys):
        code = run_cli("grad-check", "--losses", "mse")
        report = json.loads(capsys.readouterr().out)
        assert code == 0
        assert report["passed"]
        assert report["losses"]["mse"]["max_rel_err"] < 1e-4

    def test_impossible_tolerance_exits_nonzero(self, capsys):
        code = run_cli("grad-check", "--losses", "mse", "--tolerance", "0")
        assert code == 1
        assert not json.loads(capsys.readouterr().out)["passed"]


class TestBenchCommand:
    def test_outputs_csv_and_summary(self, tmp_path, capsys):
        train = synth_file(tmp_path / "train.jsonl", n=32)
        test = synth_file(tmp_path / "test.jsonl", n=16, seed=3)
        capsys.readouterr()
        out_dir = tmp_path / "bench"
        code = run_cli("bench-losses", "--train", train, "--test", test,
                       "--losses", "mocorank,mse:class_balanced",
                       "--seeds", "0,1", "--out-dir", str(out_dir), *TINY_FLAGS)
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert set(summary) == {"mocorank", "mse:class_balanced"}
        lines = (out_dir / "results.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,acc,avg_acc"
        assert len(lines) == 5
        on_disk = json.loads((out_dir / "summary.json").read_text())
        assert on_disk == summary


class TestIccCommand:
    def test_matches_hand_value(self, tmp_path, capsys):
        path = tmp_path / "ratings.csv"
        path.write_text("1,2\n3,4\n5,6\n")
        code = run_cli("icc", "--ratings", str(path))
        assert code == 0
        value = json.loads(capsys.readouterr().out)["icc"]
        assert value == pytest.approx(8.0 / 9.0, abs=1e-12)
