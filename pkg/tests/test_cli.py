from .fixtures import mini_config
from click.testing import CliRunner
from combinet.cli import cli
from combinet.utils import RunManifest
import csv
import glob
import json
import os
import pytest


def mini_document(**train):
    options = {"epochs": 1, "batch_size": 2, "crop_size": 16, "eval_samples": 1}
    options.update(train)
    return {"arch": mini_config().to_dict(), "train": options}


def run_dirs(command):
    return sorted(glob.glob(os.path.join("run", "*-{}*".format(command))))


def test_count_default_preset():
    runner = CliRunner()
    with runner.isolated_filesystem():
        result = runner.invoke(cli, [])
        assert 0 == result.exit_code, result.output
        assert "Params: 0.70M" in result.output
        assert "MACs:   3.9G" in result.output
        (run_dir,) = run_dirs("count")
        manifest = RunManifest.load(os.path.join(run_dir, "manifest.json"))
        assert [] == manifest.argv
        assert os.path.exists(manifest.artifacts["report"])


def test_count_csv_with_overrides():
    runner = CliRunner()
    with runner.isolated_filesystem():
        json.dump(mini_document(), open("mini.json", "w"))
        result = runner.invoke(
            cli, ["count", "mini.json", "--input", "16x16x3", "--samples", "3", "--format", "csv", "--set", "num_classes:4"]
        )
        assert 0 == result.exit_code, result.output
        rows = list(csv.reader(result.output.splitlines()))
        assert ["name", "kind", "out_shape", "params", "macs"] == rows[0]
        assert "1x4x16x16" == [row for row in rows if row[0] == "post.conv"][0][2]
        assert "total" == rows[-1][0]


@pytest.mark.parametrize(
    "args,message",
    [
        (["count", "no-such-preset"], "neither a config file nor a preset"),
        (["count", "--input", "224x224x1"], "--input has 1 channels"),
        (["count", "--set", "growth_rate_k:0"], "growth_rate_k must be a positive integer"),
        (["count", "--set", "dropout_p:0.1"], "dropout_p is ambiguous"),
        (["count", "--set", "nonsense:1"], "nonsense is not a valid option"),
        (["count", "--input", "224x224"], "should look like 224x224x3"),
    ],
)
def test_count_errors(args, message):
    runner = CliRunner()
    with runner.isolated_filesystem():
        result = runner.invoke(cli, args)
        assert 2 == result.exit_code
        assert message in result.output


def test_help_config():
    runner = CliRunner()
    with runner.isolated_filesystem():
        result = runner.invoke(cli, ["count", "--help-config"])
        assert 0 == result.exit_code
        assert "growth_rate_k" in result.output
        open("empty.tsv", "w").close()
        result = runner.invoke(cli, ["train", "combinet-s", "empty.tsv", "--help-config"])
        assert 0 == result.exit_code
        assert "lr_decay" in result.output


def test_version():
    from combinet.version import __version__

    result = CliRunner().invoke(cli, ["--version"])
    assert __version__ in result.output


def test_synth_train_eval_infer_replay():
    runner = CliRunner()
    with runner.isolated_filesystem():
        result = runner.invoke(cli, ["synth", "--out", "data", "--n", "6", "--size", "16", "--radius", "4"])
        assert 0 == result.exit_code, result.output
        assert os.path.join("data", "manifest.tsv") == result.output.strip()
        assert 6 == len(open(os.path.join("data", "manifest.tsv")).read().splitlines())

        json.dump(mini_document(), open("mini.json", "w"))
        result = runner.invoke(cli, ["train", "mini.json", "data/manifest.tsv", "--seed", "1"])
        assert 0 == result.exit_code, result.output
        (train_dir,) = run_dirs("train")
        checkpoint = os.path.join(train_dir, "best.cbn")
        assert os.path.exists(checkpoint)
        assert 2 == len(open(os.path.join(train_dir, "train_log.csv")).read().splitlines())
        manifest = json.load(open(os.path.join(train_dir, "manifest.json")))
        assert 1 == manifest["config"]["train"]["seed"]
        assert ["train", "mini.json", "data/manifest.tsv", "--seed", "1"] == manifest["argv"]

        result = runner.invoke(cli, ["eval", checkpoint, "data/manifest.tsv", "--samples", "2", "--repeats", "2"])
        assert 0 == result.exit_code, result.output
        assert "mIoU " in result.output
        assert "±" in result.output
        assert "class IoU:" in result.output
        (eval_dir,) = run_dirs("eval")
        assert 3 == len(open(os.path.join(eval_dir, "eval.csv")).read().splitlines())
        assert 7 == len(open(os.path.join(eval_dir, "metrics.csv")).read().splitlines())

        result = runner.invoke(cli, ["infer", checkpoint, "data/images/synth-00000.png", "--samples", "2"])
        assert 0 == result.exit_code, result.output
        (infer_dir,) = run_dirs("infer")
        for name in ("synth-00000-mask.png", "synth-00000-entropy.png", "metrics.csv"):
            assert os.path.exists(os.path.join(infer_dir, name))

        result = runner.invoke(cli, ["infer", checkpoint, "data/manifest.tsv", "--no-dropout"])
        assert 0 == result.exit_code, result.output
        rows = list(csv.reader(open(os.path.join(run_dirs("infer")[-1], "metrics.csv"))))
        assert 7 == len(rows)
        assert all(row[1] != "" for row in rows[1:])

        result = runner.invoke(cli, ["replay", os.path.join(train_dir, "manifest.json")])
        assert 0 == result.exit_code, result.output
        assert "Replaying: combinet train" in result.output
        assert 2 == len(run_dirs("train"))


def test_train_resume():
    runner = CliRunner()
    with runner.isolated_filesystem():
        runner.invoke(cli, ["synth", "--out", "data", "--n", "5", "--size", "16"])
        json.dump(mini_document(), open("mini.json", "w"))
        result = runner.invoke(cli, ["train", "mini.json", "data/manifest.tsv", "--val-fraction", "0"])
        assert 0 == result.exit_code, result.output
        (first,) = run_dirs("train")
        result = runner.invoke(
            cli,
            ["train", "mini.json", "data/manifest.tsv", "--val-fraction", "0", "--epochs", "2", "--resume", os.path.join(first, "best.cbn")],
        )
        assert 0 == result.exit_code, result.output
        assert "Trained 1 epochs" in result.output


def test_train_resume_rejects_other_architecture():
    runner = CliRunner()
    with runner.isolated_filesystem():
        runner.invoke(cli, ["synth", "--out", "data", "--n", "5", "--size", "16"])
        json.dump(mini_document(), open("mini.json", "w"))
        runner.invoke(cli, ["train", "mini.json", "data/manifest.tsv", "--val-fraction", "0"])
        (first,) = run_dirs("train")
        result = runner.invoke(
            cli,
            [
                "train",
                "mini.json",
                "data/manifest.tsv",
                "--set",
                "growth_rate_k:3",
                "--resume",
                os.path.join(first, "best.cbn"),
            ],
        )
        assert 2 == result.exit_code
        assert "different architecture" in result.output


def test_train_reports_bad_config():
    runner = CliRunner()
    with runner.isolated_filesystem():
        runner.invoke(cli, ["synth", "--out", "data", "--n", "5", "--size", "16"])
        json.dump({"arch": {"growth_rate": 3}, "train": {"epoch": 1}}, open("bad.json", "w"))
        result = runner.invoke(cli, ["train", "bad.json", "data/manifest.tsv"])
        assert 2 == result.exit_code
        assert "arch: unknown option 'growth_rate'" in result.output


def test_synth_unknown_shape():
    runner = CliRunner()
    with runner.isolated_filesystem():
        result = runner.invoke(cli, ["synth", "--out", "data", "--shape", "stars"])
        assert 2 == result.exit_code
        assert "discs, stripes" in result.output


def test_replay_needs_a_command():
    runner = CliRunner()
    with runner.isolated_filesystem():
        json.dump({"command": "replay", "argv": ["replay", "x"]}, open("m.json", "w"))
        result = runner.invoke(cli, ["replay", "m.json"])
        assert 2 == result.exit_code


def test_replay_reproduces_training_from_recorded_config():
    runner = CliRunner()
    with runner.isolated_filesystem():
        runner.invoke(cli, ["synth", "--out", "data", "--n", "6", "--size", "16", "--radius", "4"])
        json.dump(mini_document(epochs=2), open("mini.json", "w"))
        result = runner.invoke(cli, ["train", "mini.json", "data/manifest.tsv", "--seed", "3"])
        assert 0 == result.exit_code, result.output
        (original,) = run_dirs("train")
        # Editing the config file afterwards must not change the replay
        json.dump(mini_document(epochs=1, lr0=0.1), open("mini.json", "w"))
        result = runner.invoke(cli, ["replay", os.path.join(original, "manifest.json")])
        assert 0 == result.exit_code, result.output
        (replayed,) = [d for d in run_dirs("train") if d != original]
        expected = open(os.path.join(original, "train_log.csv"), "rb").read()
        assert 3 == len(expected.splitlines())
        assert expected == open(os.path.join(replayed, "train_log.csv"), "rb").read()
        recorded = RunManifest.load(os.path.join(replayed, "manifest.json"))
        assert ["train", "mini.json", "data/manifest.tsv", "--seed", "3"] == recorded.argv
        assert 2 == recorded.config["train"]["epochs"]


def test_replay_reproduces_cost_report():
    runner = CliRunner()
    with runner.isolated_filesystem():
        json.dump(mini_document(), open("mini.json", "w"))
        result = runner.invoke(cli, ["count", "mini.json", "--input", "16x16x3", "--format", "csv"])
        assert 0 == result.exit_code, result.output
        (original,) = run_dirs("count")
        os.remove("mini.json")
        result = runner.invoke(cli, ["replay", os.path.join(original, "manifest.json")])
        assert 0 == result.exit_code, result.output
        (replayed,) = [d for d in run_dirs("count") if d != original]
        expected = open(os.path.join(original, "cost.csv"), "rb").read()
        assert expected == open(os.path.join(replayed, "cost.csv"), "rb").read()


def test_replay_refuses_incomplete_manifest():
    runner = CliRunner()
    with runner.isolated_filesystem():
        os.makedirs(os.path.join("run", "old-train"))
        path = os.path.join("run", "old-train", "manifest.json")
        json.dump({"command": "train", "argv": ["train", "mini.json", "data.tsv"], "config": {"arch": {}}}, open(path, "w"))
        result = runner.invoke(cli, ["replay", path])
        assert 2 == result.exit_code
        assert "cannot be replayed" in result.output
        assert "config is missing 'train'" in result.output
