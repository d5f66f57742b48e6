import json
import re
import subprocess
import sys

import numpy as np
import pytest

from cleegn.cli import build_parser, main
from cleegn.data import load_recording
from cleegn.model import CleegnConfig, build_model, load_checkpoint_file, save_checkpoint_file
from cleegn.streaming import offline_reconstruct


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def resolved_line(caplog):
    lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("resolved config")]
    assert len(lines) == 1
    return lines[0]


@pytest.fixture(autouse=True)
def info_logs(caplog):
    caplog.set_level("INFO", logger="cleegn")


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    assert main(["synth", "--out", str(d), "--subjects", "4", "--duration", "40",
                 "--channels", "4", "--fs", "32", "--seed", "7"]) == 0
    return d


def test_synth_writes_pairs_deterministically(tmp_path, capsys):
    args = ["synth", "--subjects", "2", "--duration", "60", "--channels", "4", "--fs", "128", "--seed", "7"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["s00_clean.eegr", "s00_noisy.eegr", "s01_clean.eegr", "s01_noisy.eegr"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_without_artifacts(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path, "--subjects", "1", "--duration", "10", "--channels", "3",
                     "--blinks-per-min", "0", "--emg-per-min", "0")
    assert code == 0
    noisy, clean = load_recording(tmp_path / "s00_noisy.eegr"), load_recording(tmp_path / "s00_clean.eegr")
    np.testing.assert_array_equal(noisy.samples, clean.samples)


def test_synth_rejects_invalid_spec(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", tmp_path, "--channels", "1")
    assert code == 1 and "channels" in err


@pytest.mark.parametrize("channels,fs,total", [(56, 128, 220755), (20, 125, 14043)])
def test_info_parameter_totals(capsys, channels, fs, total):
    code, out, _ = run(capsys, "info", "--channels", channels, "--fs", fs)
    assert code == 0
    assert f"learnable parameters: {total}" in out
    assert "k=12" in out and f"n_filters={channels}" in out


def test_info_reads_checkpoint(tmp_path, capsys):
    path = tmp_path / "m.clgn"
    save_checkpoint_file(path, build_model(CleegnConfig(5, 40.0)))
    code, out, _ = run(capsys, "info", "--model", path)
    assert code == 0 and "channels=5" in out and "checkpoint:" in out


def test_train_defaults_logged_and_outputs(dataset_dir, tmp_path, capsys, caplog):
    code, _, _ = run(capsys, "train", "--data", dataset_dir, "--folds", "2", "--epochs", "1", "--out", tmp_path)
    assert code == 0
    assert "batch=64 epochs=1 lr=0.001 gamma=0.8" in resolved_line(caplog)
    assert sorted(p.name for p in (tmp_path / "models").iterdir()) == ["fold0-best.clgn", "fold1-best.clgn"]
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["folds"] == 2 and len(report["per_subject_mse"]) == 4


def test_train_default_recipe_echo(capsys, dataset_dir, tmp_path, monkeypatch, caplog):
    # only inspect the resolved configuration; skip the actual training
    import cleegn.cli as cli

    monkeypatch.setitem(cli.COMMANDS, "train", lambda args, cfg: None)
    code, _, _ = run(capsys, "train", "--data", dataset_dir)
    assert code == 0 and "train batch=64 epochs=40 lr=0.001 gamma=0.8" in resolved_line(caplog)


def test_train_zero_epochs_saves_initial_model(dataset_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", dataset_dir, "--folds", "2", "--epochs", "0", "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(f["train_loss"] == [] and f["val_loss"] == [] for f in report["folds"])
    model, meta = load_checkpoint_file(tmp_path / "models" / "fold0-best.clgn")
    assert np.isnan(meta.val_loss)


def test_train_needs_enough_subjects(dataset_dir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", dataset_dir, "--folds", "5", "--epochs", "0", "--out", tmp_path)
    assert code == 1 and "k must be" in err


def test_config_file_and_flag_precedence(dataset_dir, tmp_path, capsys, caplog):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# training run\ndata = {dataset_dir}\nepochs = 0\ntrain.batch = 16\n"
                   "synth.subjects = 3  # other command, ignored\nfolds = 2\n")
    code, _, _ = run(capsys, "train", "--config", cfg, "--batch", "8", "--out", tmp_path / "o")
    assert code == 0
    assert "batch=8 epochs=0" in resolved_line(caplog)
    assert json.loads((tmp_path / "o" / "report.json").read_text())["config"]["batch"] == 8


@pytest.mark.parametrize("text,message", [
    ("bogus = 1\n", "unknown key 'bogus'"),
    ("epochs = many\n", "bad value"),
    ("nonsense line\n", "expected 'key = value'"),
    ("eval.color = red\n", "unknown key"),
])
def test_config_errors(tmp_path, capsys, dataset_dir, text, message):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    code, _, err = run(capsys, "train", "--config", cfg, "--data", dataset_dir)
    assert code == 1 and message in err


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
    assert "--data" in capsys.readouterr().err


def test_reconstruct_eval_psd_pca(dataset_dir, tmp_path, capsys):
    model_path = tmp_path / "m.clgn"
    save_checkpoint_file(model_path, build_model(CleegnConfig(4, 32.0), seed=1))
    noisy = dataset_dir / "s00_noisy.eegr"
    recon = tmp_path / "r.eegr"
    assert run(capsys, "reconstruct", "--model", model_path, "--in", noisy, "--out", recon)[0] == 0
    expected = offline_reconstruct(load_checkpoint_file(model_path)[0], load_recording(noisy))
    np.testing.assert_allclose(load_recording(recon).samples, expected.samples.astype(np.float32))

    code, out, _ = run(capsys, "eval", "--recon", recon, "--reference", recon, "--json", tmp_path / "e.json")
    assert code == 0 and out.splitlines()[0] == "overall_mse=0"
    assert json.loads((tmp_path / "e.json").read_text())["overall_mse"] == 0

    events = tmp_path / "ev.csv"
    events.write_text("sample,label\n100,1\n400,0\n")
    code, out, _ = run(capsys, "eval", "--recon", noisy, "--reference", dataset_dir / "s00_clean.eegr",
                       "--events", events, "--t0", "0", "--t1", "1")
    assert code == 0 and out.startswith("overall_mse=")

    assert run(capsys, "psd", "--in", noisy, "--out", tmp_path / "p.csv")[0] == 0
    assert (tmp_path / "p.csv").read_text().startswith("freq,")

    code, _, _ = run(capsys, "pca", "--in", noisy, "--model", model_path, "--layers", "0,1,2,3,4,5",
                     "--out", tmp_path / "pca.csv", "--json", tmp_path / "pca.json")
    assert code == 0
    summary = json.loads((tmp_path / "pca.json").read_text())
    assert list(summary["points_per_layer"].values()) == [4, 4, 16, 16, 16, 4]
    assert len((tmp_path / "pca.csv").read_text().splitlines()) == 1 + 60

    code, _, err = run(capsys, "pca", "--in", noisy, "--layers", "2", "--out", tmp_path / "x.csv")
    assert code == 1 and "--model" in err


def test_preprocess_with_epochs(tmp_path, capsys, dataset_dir):
    events = tmp_path / "ev.csv"
    events.write_text("sample,label\n100,1\n400,0\n1275,1\n")
    out = tmp_path / "pre.eegr"
    code, _, _ = run(capsys, "preprocess", "--in", dataset_dir / "s01_noisy.eegr", "--out", out, "--hi", "12",
                     "--taps", "129", "--events", events, "--t0", "0", "--t1", "1.25",
                     "--epochs-out", tmp_path / "ep.npz")
    assert code == 0
    rec = load_recording(out)
    assert np.max(np.abs(rec.samples.mean(axis=0))) < 1e-4
    ep = np.load(tmp_path / "ep.npz")
    assert ep["epochs"].shape == (2, 4, 40) and ep["labels"].tolist() == [1, 0]
    assert ep["skipped"].tolist() == [[1275, 1]]


def test_help_lists_defaults(capsys):
    parser = build_parser()
    for name in ("synth", "preprocess", "train", "reconstruct", "eval", "psd", "pca", "info"):
        with pytest.raises(SystemExit):
            parser.parse_args([name, "--help"])
        text = capsys.readouterr().out
        assert "--config" in text
    with pytest.raises(SystemExit):
        parser.parse_args(["train", "--help"])
    assert re.search(r"--batch BATCH\s+mini-batch size \(default: 64\)", capsys.readouterr().out)


def test_seed_from_environment(tmp_path, monkeypatch, capsys, caplog):
    monkeypatch.setenv("CLEEGN_SEED", "11")
    code, _, _ = run(capsys, "synth", "--out", tmp_path, "--subjects", "1", "--duration", "5", "--channels", "2")
    assert code == 0 and " seed=11 " in resolved_line(caplog)


def test_raw_frame_streaming(tmp_path):
    model = build_model(CleegnConfig(3, 20.0), seed=2)
    path = tmp_path / "m.clgn"
    save_checkpoint_file(path, model)
    model = load_checkpoint_file(path)[0]
    x = np.random.default_rng(0).normal(size=(3, 200)).astype("<f4")
    proc = subprocess.run([sys.executable, "-m", "cleegn.cli", "--log-level", "WARNING", "reconstruct",
                           "--model", str(path), "--in", "-", "--out", "-"],
                          input=x.T.tobytes(), capture_output=True, check=True)
    got = np.frombuffer(proc.stdout, dtype="<f4").reshape(-1, 3).T
    from cleegn.streaming import stream_init, stream_push

    expected = stream_push(stream_init(model, 20.0), x)
    assert got.shape == expected.shape == (3, 130)
    np.testing.assert_array_equal(got, expected)
