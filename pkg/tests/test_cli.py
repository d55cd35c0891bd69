import json
import os

import numpy as np
import pytest

from pix2affect import cli
from pix2affect.dataset import load_dataset
from pix2affect.video import load_frames, read_pnm


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("corpus"))
    rc = cli.main(["synth", "--videos", "3", "--duration", "6", "--seed", "5",
                   "--out", out])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def dataset_path(corpus_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "corpus.afd")
    rc = cli.main(["build", "--corpus", corpus_dir, "--epsilon", "0.05",
                   "--out", out])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint_path(dataset_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("model") / "model.afm")
    rc = cli.main(["train", "--dataset", dataset_path, "--model", "2dframe",
                   "--epochs", "1", "--batch-size", "8", "--seed", "3",
                   "--out", out])
    assert rc == 0
    return out


class TestSynth:
    def test_layout_and_frame_count(self, corpus_dir):
        subdirs = sorted(os.listdir(corpus_dir))
        assert "video_000" in subdirs and "run_manifest.json" in subdirs
        vdir = os.path.join(corpus_dir, "video_000")
        frames = [f for f in os.listdir(vdir) if f.endswith(".pgm")]
        assert len(frames) == 180  # 6 s at 30 Hz
        assert os.path.exists(os.path.join(vdir, "trace.csv"))

    def test_frames_decode(self, corpus_dir):
        stack = load_frames(os.path.join(corpus_dir, "video_000"))
        assert stack.shape == (180, 72, 128)

    def test_idempotent_given_seed(self, corpus_dir, tmp_path):
        again = str(tmp_path / "again")
        assert cli.main(["synth", "--videos", "3", "--duration", "6",
                         "--seed", "5", "--out", again]) == 0
        a = open(os.path.join(corpus_dir, "video_001", "frame_00042.pgm"), "rb").read()
        b = open(os.path.join(again, "video_001", "frame_00042.pgm"), "rb").read()
        assert a == b
        ta = open(os.path.join(corpus_dir, "video_001", "trace.csv")).read()
        tb = open(os.path.join(again, "video_001", "trace.csv")).read()
        assert ta == tb

    def test_manifest_differs_only_in_timestamp(self, corpus_dir, tmp_path):
        again = str(tmp_path / "again2")
        assert cli.main(["synth", "--videos", "3", "--duration", "6",
                         "--seed", "5", "--out", again]) == 0
        m1 = json.load(open(os.path.join(corpus_dir, "run_manifest.json")))
        m2 = json.load(open(os.path.join(again, "run_manifest.json")))
        m1.pop("created_utc"), m2.pop("created_utc")
        m1.pop("outputs"), m2.pop("outputs")  # paths differ by tmpdir
        assert m1 == m2

    def test_zero_videos_is_usage_error(self, tmp_path):
        assert cli.main(["synth", "--videos", "0", "--out", str(tmp_path / "x")]) == 2


class TestBuild:
    def test_dataset_readable(self, dataset_path):
        ds = load_dataset(dataset_path)
        assert ds.epsilon == 0.05
        assert len(ds.video_ids) == 3
        assert all(r.window.shape == (8, 72, 128) for r in ds.records[:5])

    def test_sidecar_manifest(self, dataset_path):
        text = open(dataset_path + ".manifest.txt").read()
        assert "epsilon=0.05" in text
        assert "video.0.id=video_000" in text
        assert "trace_mean" in text

    def test_epsilon_flag_accepts_published_values(self, corpus_dir, tmp_path):
        for eps in ("0", "0.05", "0.10", "0.20"):
            out = str(tmp_path / f"e{eps}.afd")
            assert cli.main(["build", "--corpus", corpus_dir, "--epsilon", eps,
                             "--out", out]) == 0

    def test_missing_corpus_is_data_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["build", "--corpus", str(empty),
                         "--out", str(tmp_path / "x.afd")]) == 3


class TestXval:
    def test_report_files_and_determinism(self, dataset_path, tmp_path):
        args = ["xval", "--dataset", dataset_path, "--model", "2dframe",
                "--epochs", "1", "--batch-size", "8", "--seed", "11"]
        out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        assert cli.main(args + ["--out", out1]) == 0
        assert cli.main(args + ["--out", out2]) == 0
        j1, j2 = open(out1 + ".json").read(), open(out2 + ".json").read()
        assert j1 == j2
        doc = json.loads(j1)
        assert set(doc) == {"model", "epsilon", "seed", "mean_accuracy", "ci95",
                            "mean_baseline", "folds"}
        assert len(doc["folds"]) == 3
        table = open(out1 + ".txt").read()
        assert "epsilon" in table and "Baseline" in table and "2DFrameCNN" in table


class TestTrainEval:
    def test_eval_prints_accuracy(self, dataset_path, checkpoint_path, tmp_path, capsys):
        out = str(tmp_path / "eval.json")
        assert cli.main(["eval", "--dataset", dataset_path,
                         "--checkpoint", checkpoint_path, "--out", out]) == 0
        doc = json.load(open(out))
        assert doc["model"] == "2DFrameCNN"
        assert 0.0 <= doc["accuracy"] <= 1.0

    def test_checkpoint_round_trips(self, checkpoint_path, tmp_path):
        from pix2affect import models
        with open(checkpoint_path, "rb") as fh:
            spec, params, seed = models.load_checkpoint(fh)
        again = str(tmp_path / "again.afm")
        with open(again, "wb") as fh:
            models.save_checkpoint(fh, spec, params, seed)
        assert open(checkpoint_path, "rb").read() == open(again, "rb").read()


class TestGradcamCommand:
    def test_heatmaps_written_and_parseable(self, dataset_path, checkpoint_path, tmp_path):
        out = str(tmp_path / "maps")
        assert cli.main(["gradcam", "--dataset", dataset_path,
                         "--checkpoint", checkpoint_path, "--video", "video_000",
                         "--window", "2", "--classes", "both", "--out", out]) == 0
        names = sorted(os.listdir(out))
        pgms = [n for n in names if n.endswith(".pgm")]
        assert len(pgms) == 4  # two classes x {heat, overlay}
        assert "index.txt" in names
        stack = load_frames(out)
        assert stack.shape[1:] == (72, 128)
        index = open(os.path.join(out, "index.txt")).read()
        assert "class=low" in index and "class=high" in index

    def test_empty_selector_is_exit_3(self, dataset_path, checkpoint_path, tmp_path):
        assert cli.main(["gradcam", "--dataset", dataset_path,
                         "--checkpoint", checkpoint_path, "--video", "nope",
                         "--out", str(tmp_path / "maps")]) == 3

    def test_invalid_layer_lists_valid_ones(self, dataset_path, checkpoint_path,
                                            tmp_path, capsys):
        rc = cli.main(["gradcam", "--dataset", dataset_path,
                       "--checkpoint", checkpoint_path, "--video", "video_000",
                       "--window", "0", "--layer", "1",
                       "--out", str(tmp_path / "m")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "[0, 3, 6]" in err


class TestConfigFile:
    def test_config_supplies_defaults_flags_win(self, corpus_dir, tmp_path):
        cfg = tmp_path / "build.conf"
        cfg.write_text("epsilon=0.20\nseed=9\n")
        out = str(tmp_path / "cfg.afd")
        assert cli.main(["build", "--corpus", corpus_dir, "--config", str(cfg),
                         "--out", out]) == 0
        assert load_dataset(out).epsilon == 0.20
        out2 = str(tmp_path / "cfg2.afd")
        assert cli.main(["build", "--corpus", corpus_dir, "--config", str(cfg),
                         "--epsilon", "0.05", "--out", out2]) == 0
        assert load_dataset(out2).epsilon == 0.05

    def test_unknown_config_key_is_usage_error(self, corpus_dir, tmp_path):
        cfg = tmp_path / "bad.conf"
        cfg.write_text("banana=1\n")
        assert cli.main(["build", "--corpus", corpus_dir, "--config", str(cfg),
                         "--out", str(tmp_path / "x.afd")]) == 2

    def test_bad_log_level_env(self, monkeypatch, corpus_dir, tmp_path):
        monkeypatch.setenv("PIX2AFFECT_LOG", "shout")
        assert cli.main(["build", "--corpus", corpus_dir,
                         "--out", str(tmp_path / "x.afd")]) == 2
