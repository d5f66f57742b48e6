import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cleegn.data import Recording, SynthSpec, save_recording, synth_subject
from cleegn.harness import (
    FoldSpec,
    TrainConfig,
    TrainingError,
    ablation_driver,
    batched_loss,
    collect_windows,
    cross_validate,
    evaluate_fold,
    load_dataset,
    make_folds,
    mean_stderr,
    recording_mse,
    split_indices,
    train_fold,
)
from cleegn.model import CleegnConfig, build_model, load_checkpoint_file, param_count
from cleegn.neuralcore import same_padding

QUICK = TrainConfig(epochs=3, seed=1)


def identity_dataset(n_subjects, minutes, c=4, fs=128.0, seed0=100):
    ds = {}
    for i in range(n_subjects):
        _, clean = synth_subject(SynthSpec(n_channels=c, fs=fs, duration_sec=minutes * 60, seed=seed0 + i))
        ds[clean.subject_id] = (clean, clean)
    return ds


def identity_model(c, fs):
    """Weights that copy the input exactly (float64)."""
    config = CleegnConfig(c, fs)
    m = build_model(config, dtype=np.float64)
    for layer in (m.enc_spatial, m.enc_temporal, m.dec_temporal, m.dec_spatial, m.dec_out):
        layer.weights[...] = 0
    left = same_padding(config.kernel_width)[0]
    top = same_padding(c)[0]
    m.enc_spatial.weights[np.arange(c), np.arange(c), 0, 0] = 1
    m.enc_temporal.weights[0, 0, left, 0] = 1
    m.dec_temporal.weights[0, 0, left, 0] = 1
    m.dec_spatial.weights[0, top, 0, 0] = 1
    m.dec_out.weights[0, top, 0, 0] = 1
    for name in ("bn1", "bn2", "bn3", "bn4"):
        bn = getattr(m, name)
        bn.gamma[:] = np.sqrt(bn.running_var + bn.eps)
    return m


# -- folds -------------------------------------------------------------------------------


def test_make_folds_examples():
    subjects = [f"s{i:02d}" for i in range(16)]
    folds = make_folds(subjects[:4], 2, seed=0)
    assert [len(f.test_subjects) for f in folds] == [2, 2]
    assert not set(folds[0].test_subjects) & set(folds[1].test_subjects)
    loso = make_folds(subjects, 16)
    assert all(len(f.test_subjects) == 1 for f in loso)
    assert make_folds(subjects, 4, seed=3) == make_folds(subjects, 4, seed=3)
    with pytest.raises(ValueError):
        make_folds(subjects[:3], 4)
    with pytest.raises(ValueError):
        make_folds(subjects, 1)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 30), data=st.data())
def test_folds_partition_subjects(n, data):
    k = data.draw(st.integers(2, n))
    seed = data.draw(st.integers(0, 1000))
    subjects = [f"x{i}" for i in range(n)]
    folds = make_folds(subjects, k, seed)
    tests = [set(f.test_subjects) for f in folds]
    assert set().union(*tests) == set(subjects)
    assert sum(map(len, tests)) == n
    assert max(map(len, tests)) - min(map(len, tests)) <= 1
    for f in folds:
        assert set(f.train_subjects) == set(subjects) - set(f.test_subjects)


def test_foldspec_rejects_overlap():
    with pytest.raises(ValueError, match="both"):
        FoldSpec(0, ("a", "b"), ("b",))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(minutes_per_subject=0)
    assert (TrainConfig().batch_size, TrainConfig().epochs, TrainConfig().lr0, TrainConfig().gamma) == (64, 40, 1e-3, 0.8)


def test_mean_stderr():
    assert mean_stderr([1.0, 3.0]) == (2.0, 1.0)
    assert mean_stderr([5.0]) == (5.0, 0.0)


# -- dataset loading ----------------------------------------------------------------------


def test_load_dataset_pairs_files(tmp_path, small_dataset):
    for sid, (noisy, clean) in list(small_dataset.items())[:2]:
        save_recording(noisy, tmp_path / f"{sid}_noisy.eegr")
        save_recording(clean, tmp_path / f"{sid}_clean.eegr")
    (tmp_path / "notes.txt").write_text("ignored")
    ds = load_dataset(tmp_path)
    assert sorted(ds) == ["s00", "s01"]
    assert ds["s00"][1].subject_id == "s00"
    save_recording(small_dataset["s02"][1], tmp_path / "s02_reference.eegr")
    with pytest.raises(FileNotFoundError, match="s02"):
        load_dataset(tmp_path)


# -- training ------------------------------------------------------------------------------


def test_training_is_deterministic(small_dataset):
    fold = make_folds(list(small_dataset), 2)[0]
    _, a = train_fold(small_dataset, fold, QUICK)
    _, b = train_fold(small_dataset, fold, QUICK)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    _, c = train_fold(small_dataset, fold, TrainConfig(epochs=3, seed=2))
    assert c.val_loss != a.val_loss


def test_zero_learning_rate_changes_nothing(small_dataset):
    fold = make_folds(list(small_dataset), 2)[0]
    cfg = TrainConfig(epochs=3, lr0=0.0, seed=4)
    model, rep = train_fold(small_dataset, fold, cfg)
    untouched, _ = train_fold(small_dataset, fold, TrainConfig(epochs=0, seed=4))
    for (name, a), (_, b) in zip(model.params().items(), untouched.params().items()):
        np.testing.assert_array_equal(a, b, err_msg=name)
    assert len(set(rep.val_loss)) == 1


def test_zero_epochs_report(small_dataset, tmp_path):
    fold = make_folds(list(small_dataset), 2)[0]
    model, rep = train_fold(small_dataset, fold, TrainConfig(epochs=0), checkpoint_dir=tmp_path)
    assert rep.train_loss == [] and rep.val_loss == [] and rep.best_val_loss is None
    loaded, meta = load_checkpoint_file(tmp_path / "fold0-best.clgn")
    assert np.isnan(meta.val_loss)
    assert loaded.n_learnable() == param_count(model.config)


def test_no_test_subject_reaches_training(small_dataset):
    for fold in make_folds(list(small_dataset), 4):
        _, _, tags = collect_windows(small_dataset, fold.train_subjects, QUICK)
        assert not set(tags.tolist()) & set(fold.test_subjects)
        assert set(tags.tolist()) == set(fold.train_subjects)


def test_minutes_cap_limits_windows(small_dataset):
    subjects = list(small_dataset)[:1]
    x, _, _ = collect_windows(small_dataset, subjects, TrainConfig(minutes_per_subject=0.5))
    # 30 s at 64 Hz, 256-sample windows, stride 128
    assert len(x) == (30 * 64 - 256) // 128 + 1
    with pytest.raises(ValueError, match="available"):
        collect_windows(small_dataset, subjects, TrainConfig(minutes_per_subject=5))


def test_best_checkpoint_reproduces_reported_loss(small_dataset, tmp_path):
    fold = make_folds(list(small_dataset), 2)[1]
    cfg = TrainConfig(epochs=4, seed=6)
    model, rep = train_fold(small_dataset, fold, cfg, checkpoint_dir=tmp_path)
    assert rep.best_val_loss == min(rep.val_loss)
    assert rep.val_loss[rep.best_epoch] == rep.best_val_loss
    loaded, meta = load_checkpoint_file(tmp_path / "fold1-best.clgn")
    assert meta.epoch == rep.best_epoch and meta.seed == 6
    x, y, _ = collect_windows(small_dataset, fold.train_subjects, cfg)
    _, val_idx = split_indices(len(x), cfg)
    assert abs(batched_loss(loaded, x[val_idx], y[val_idx]) - rep.best_val_loss) <= 1e-6 * rep.best_val_loss


@pytest.mark.filterwarnings("ignore:overflow")
def test_training_errors(small_dataset):
    with pytest.raises(TrainingError, match="no training subjects"):
        train_fold(small_dataset, FoldSpec(0, (), ("s00",)), QUICK)
    short = {"a": (small_dataset["s00"][0].head(100),) * 2}
    with pytest.raises(TrainingError, match="no training windows"):
        train_fold(short, FoldSpec(0, ("a",), ()), QUICK)
    with pytest.raises(TrainingError, match="non-finite"):
        train_fold(small_dataset, FoldSpec(0, ("s00",), ()), TrainConfig(epochs=3, lr0=1e30))


def test_small_learning_rate_first_epoch_does_not_increase_loss():
    # 15 batches per epoch, so an epoch's mean loss is not dominated by which windows were drawn
    ds = identity_dataset(2, 20.0, fs=64.0)
    fold = FoldSpec(0, tuple(ds), ())
    ok = 0
    for seed in range(20):
        _, rep = train_fold(ds, fold, TrainConfig(epochs=2, lr0=1e-4, seed=seed))
        ok += rep.train_loss[1] <= rep.train_loss[0]
    assert ok >= 18


@pytest.mark.xfail(strict=True, reason="two 2-minute subjects give one 64-window batch per epoch; "
                                       "40 decaying Adam steps cannot fit the identity (see notes)")
def test_identity_task_at_minimal_scale():
    ds = identity_dataset(2, 2.0)
    _, rep = train_fold(ds, FoldSpec(0, tuple(ds), ()), TrainConfig(seed=0))
    variance = np.mean([r.samples.var(axis=1).mean() for r, _ in ds.values()])
    assert rep.best_val_loss < 0.01 * variance


# -- evaluation -----------------------------------------------------------------------------


def test_copying_model_scores_input_error(small_dataset):
    model = identity_model(4, 64.0)
    fold = make_folds(list(small_dataset), 2)[0]
    res = evaluate_fold(model, small_dataset, fold)
    for sid in fold.test_subjects:
        noisy, clean = small_dataset[sid]
        assert res.per_subject[sid] == recording_mse(noisy, clean)
    assert res.mean == pytest.approx(np.mean(list(res.per_subject.values())))


def test_evaluation_needs_reference(small_dataset):
    ds = dict(small_dataset)
    ds["s00"] = (ds["s00"][0], None)
    with pytest.raises(ValueError, match="no reference"):
        evaluate_fold(identity_model(4, 64.0), ds, FoldSpec(0, ("s01",), ("s00",)))


def test_parallel_folds_match_serial(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, seed=3)
    serial, per_a = cross_validate(small_dataset, 2, cfg, tmp_path / "a")
    parallel, per_b = cross_validate(small_dataset, 2, cfg, tmp_path / "b", jobs=2)
    assert per_a == per_b
    assert sorted(per_a) == sorted(small_dataset)
    for k in range(2):
        assert (tmp_path / "a" / f"fold{k}-best.clgn").read_bytes() == (tmp_path / "b" / f"fold{k}-best.clgn").read_bytes()
    assert json.loads(serial[0].to_json())["val_loss"] == parallel[0].val_loss


# -- ablations --------------------------------------------------------------------------------


def test_ablation_full_value_matches_cross_validation(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, seed=0)
    rows = ablation_driver(small_dataset, "minutes_per_subject", [None], cfg, k=2, out_csv=tmp_path / "t.csv")
    _, per = cross_validate(small_dataset, 2, cfg)
    assert len(rows) == 1
    assert rows[0][1] == pytest.approx(mean_stderr(per.values())[0], rel=1e-12)
    with open(tmp_path / "t.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["minutes_per_subject", "mean_mse", "stderr"] and table[1][0] == "full"


def test_ablation_minutes_rows_finite(small_dataset):
    rows = ablation_driver(small_dataset, "minutes_per_subject", [0.5, 1.0], TrainConfig(epochs=1), k=2)
    assert [r[0] for r in rows] == [0.5, 1.0]
    assert all(np.isfinite(r[1]) and np.isfinite(r[2]) for r in rows)
    with pytest.raises(ValueError, match="available"):
        ablation_driver(small_dataset, "minutes_per_subject", [10.0], TrainConfig(epochs=1), k=2)


def test_ablation_subject_count_draws():
    ds = {}
    for seed in range(8):
        noisy, clean = synth_subject(SynthSpec(n_channels=4, fs=32.0, duration_sec=40, seed=seed))
        ds[noisy.subject_id] = (noisy, clean)
    rows = ablation_driver(ds, "n_subjects", [2, 6], TrainConfig(epochs=1), k=4, n_draws=3)
    assert [r[0] for r in rows] == [2, 6]
    assert all(np.isfinite(r[1]) and r[2] > 0 for r in rows)
    with pytest.raises(ValueError, match="exceeds"):
        ablation_driver(ds, "n_subjects", [7], TrainConfig(epochs=1), k=4)
    with pytest.raises(ValueError, match="axis"):
        ablation_driver(ds, "channels", [2], TrainConfig(epochs=1))


def test_recording_mse_shape_check():
    a = Recording(["a", "b"], 10.0, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        recording_mse(a, a.head(3))
