"""End-to-end checks of the batch operator surface."""
import json

import numpy as np
import pytest

from roomdiff import cli
from roomdiff.checkpoint import load_checkpoint
from roomdiff.control_denoiser import desk_config, init_params
from roomdiff.designhelper_mini import read_manifest, read_split
from roomdiff.errors import ConfigError
from roomdiff.latent_codec import Codec, read_ppm


FAST_TRAIN = [
    "--set", "schedule.T=10",
    "--set", "train.batch_size=2",
    "--set", "train.scorer_epochs=40",
]
FAST_EVAL = [
    "--set", "eval.encoder_corpus=40",
    "--set", "eval.encoder_steps=20",
    "--set", "eval.classifier_corpus=40",
    "--set", "eval.classifier_steps=20",
    "--set", "eval.ks=[1]",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.run(["gen-data", "--out", str(out), "--count", "10", "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("trained")
    argv = ["train", "--data", str(corpus_dir), "--out", str(out), "--steps", "2"]
    assert cli.run(argv + FAST_TRAIN) == 0
    return out


@pytest.fixture(scope="module")
def sample_dir(tmp_path_factory, trained_dir):
    out = tmp_path_factory.mktemp("samples")
    argv = [
        "sample", "--checkpoint", str(trained_dir / "checkpoint.ddmp"),
        "--out", str(out), "--count", "2", "--seed", "3",
        "--prompt", "a modern living room with a sofa of width 3 and height 2",
    ]
    assert cli.run(argv) == 0
    return out


def _tree_bytes(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_gen_data_is_reproducible(tmp_path, corpus_dir):
    again = tmp_path / "again"
    assert cli.run(["gen-data", "--out", str(again), "--count", "10", "--seed", "7"]) == 0
    assert _tree_bytes(again) == _tree_bytes(corpus_dir)


def test_gen_data_records_are_readable(corpus_dir):
    records = read_split(corpus_dir, "train")
    assert len(records) == 10
    spec, doc, img = records[0]
    assert img.shape == (32, 32, 3)
    assert doc.prompt.startswith(f"a {spec.style} {spec.space_type}")


def test_gen_data_merges_splits(tmp_path):
    out = tmp_path / "two-splits"
    assert cli.run(["gen-data", "--out", str(out), "--count", "4", "--seed", "1"]) == 0
    assert cli.run(["gen-data", "--out", str(out), "--count", "3", "--seed", "1",
                    "--split", "val"]) == 0
    manifest = read_manifest(out)
    assert manifest["splits"] == {"train": 4, "val": 3}
    assert len(read_split(out, "val")) == 3


def test_run_manifest_lists_outputs(corpus_dir):
    manifest = json.loads((corpus_dir / "run.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 7
    assert "train/000000.ppm" in manifest["outputs"]
    assert "run.json" not in manifest["outputs"]
    # no clocks anywhere: identical runs must produce identical manifests
    assert "time" not in json.dumps(manifest).lower()


def test_train_zero_steps_checkpoint_equals_init(tmp_path, corpus_dir):
    out = tmp_path / "zero"
    argv = ["train", "--data", str(corpus_dir), "--out", str(out), "--steps", "0"]
    assert cli.run(argv + FAST_TRAIN) == 0
    ck = load_checkpoint(out / "checkpoint.ddmp")
    images = [img for _s, _d, img in read_split(corpus_dir, "train")]
    codec = Codec.create(4, seed=0).fit(images)
    fresh = init_params(desk_config(codec.channels, 8), 0)
    stored = {k[len("model."):]: v for k, v in ck.tensors.items() if k.startswith("model.")}
    assert set(stored) == set(fresh.values)
    for name in stored:
        assert np.array_equal(stored[name], fresh.values[name])
    np.testing.assert_array_equal(ck.tensors["codec.mixing"], codec.mixing)


def test_train_writes_curve_and_checkpoint(trained_dir):
    lines = (trained_dir / "curve.csv").read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 3
    ck = load_checkpoint(trained_dir / "checkpoint.ddmp")
    assert ck.config["resume_step"] == 2
    assert ck.config["model"]["in_channels"] == 48
    assert "text.scorer.w1" in ck.tensors


def test_train_run_is_reproducible(tmp_path, corpus_dir, trained_dir):
    again = tmp_path / "again"
    argv = ["train", "--data", str(corpus_dir), "--out", str(again), "--steps", "2"]
    assert cli.run(argv + FAST_TRAIN) == 0
    assert (again / "checkpoint.ddmp").read_bytes() == (
        trained_dir / "checkpoint.ddmp").read_bytes()


def test_sample_outputs(sample_dir):
    meta = json.loads((sample_dir / "samples.json").read_text())
    assert meta["count"] == 2
    img = read_ppm(sample_dir / "000000.ppm")
    assert img.shape == (32, 32, 3)
    assert (sample_dir / "contact_sheet.ppm").exists()


def test_sample_same_seed_same_pixels(tmp_path, trained_dir, sample_dir):
    again = tmp_path / "again"
    argv = [
        "sample", "--checkpoint", str(trained_dir / "checkpoint.ddmp"),
        "--out", str(again), "--count", "2", "--seed", "3",
        "--prompt", "a modern living room with a sofa of width 3 and height 2",
    ]
    assert cli.run(argv) == 0
    assert (again / "000000.ppm").read_bytes() == (sample_dir / "000000.ppm").read_bytes()


def test_eval_report(tmp_path, sample_dir, corpus_dir, capsys):
    out = tmp_path / "eval"
    argv = ["eval", "--generated", str(sample_dir), "--reference", str(corpus_dir),
            "--out", str(out)]
    with pytest.warns(RuntimeWarning):
        assert cli.run(argv + FAST_EVAL) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["n_generated"] == 2
    assert report["n_reference"] == 10
    assert report["frechet_distance"] >= 0.0
    assert report["inception_proxy"]["score"] >= 1.0
    assert "frechet_distance" in capsys.readouterr().out


def test_gradcheck_tiny(tmp_path, capsys):
    out = tmp_path / "gc"
    argv = ["gradcheck", "--preset", "tiny", "--out", str(out),
            "--set", "gradcheck.subset=20"]
    assert cli.run(argv) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] is True
    assert report["max_rel_err"] < 1e-4
    assert "max relative error" in capsys.readouterr().out


def test_elbo_report(tmp_path):
    out = tmp_path / "elbo"
    argv = ["elbo", "--out", str(out),
            "--set", "elbo.n_data=16", "--set", "elbo.mc_samples=16"]
    assert cli.run(argv) == 0
    report = json.loads((out / "elbo.json").read_text())
    assert report["elbo_below_ll"] is True
    assert report["mean_gap"] > -3 * report["gap_sem"]


# configuration handling


def test_unknown_set_key_exits_2(tmp_path, capsys):
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "nosuch.key=1"]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_bad_count_exits_2(tmp_path):
    assert cli.run(["gen-data", "--out", str(tmp_path), "--count", "0"]) == 2


def test_missing_data_dir_exits_2(tmp_path):
    assert cli.run(["train", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "out")]) == 2


def test_malformed_config_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.run(["gen-data", "--out", str(tmp_path / "o"),
                    "--config", str(bad)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_truncated_checkpoint_exits_2(tmp_path, trained_dir):
    clipped = tmp_path / "clipped.ddmp"
    data = (trained_dir / "checkpoint.ddmp").read_bytes()
    clipped.write_bytes(data[: len(data) // 2])
    assert cli.run(["sample", "--checkpoint", str(clipped),
                    "--out", str(tmp_path / "o")]) == 2


def test_missing_subcommand_exits_2(capsys):
    assert cli.run([]) == 2
    capsys.readouterr()


def test_set_parses_json_then_falls_back_to_string():
    cfg = cli.load_config(overrides=("train.lr=0.005", "data.split=holdout"))
    assert cfg["train"]["lr"] == 0.005
    assert cfg["data"]["split"] == "holdout"


def test_set_rejects_type_mismatch():
    with pytest.raises(ConfigError):
        cli.load_config(overrides=("train.steps=fast",))


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 10, "train": {"steps": 5}}))
    cfg = cli.load_config(path, overrides=("seed=20",), flag_sets=[("seed", 30)])
    assert cfg["seed"] == 30
    assert cfg["train"]["steps"] == 5
    assert cfg.config_hash() == cli.load_config(path, ("seed=20",), [("seed", 30)]).config_hash()


def test_constraints_subtree_is_open():
    cfg = cli.load_config(overrides=('data.constraints={"space_type":"study"}',))
    assert cfg["data"]["constraints"] == {"space_type": "study"}


def test_thread_count_env(monkeypatch):
    monkeypatch.delenv("DIFF_DESIGN_THREADS", raising=False)
    assert cli.thread_count() >= 1
    monkeypatch.setenv("DIFF_DESIGN_THREADS", "1")
    assert cli.thread_count() == 1
    monkeypatch.setenv("DIFF_DESIGN_THREADS", "0")
    with pytest.raises(ConfigError):
        cli.thread_count()
    monkeypatch.setenv("DIFF_DESIGN_THREADS", "many")
    with pytest.raises(ConfigError):
        cli.thread_count()


def test_bad_thread_env_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DIFF_DESIGN_THREADS", "-2")
    assert cli.run(["gen-data", "--out", str(tmp_path), "--count", "1"]) == 2
    assert "DIFF_DESIGN_THREADS" in capsys.readouterr().err
