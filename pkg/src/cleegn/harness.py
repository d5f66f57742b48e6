"""Subject-disjoint cross-validation, the training loop and data-size ablations."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.preprocess import segment_windows, stack_windows
from .data.recording import Recording, load_recording
from .model import (
    CheckpointMeta,
    CleegnConfig,
    CleegnModel,
    backward,
    build_model,
    forward,
    save_checkpoint_file,
)
from .neuralcore import AdamState, NonFiniteGradientError, adam_step, lr_schedule, mse_loss
from .streaming import MergePolicy, offline_reconstruct

log = logging.getLogger(__name__)

# subject id -> (noisy, reference)
Dataset = dict


class TrainingError(RuntimeError):
    """Training cannot proceed (no data, diverged loss)."""


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    train_subjects: tuple
    test_subjects: tuple

    def __post_init__(self):
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ValueError(f"fold {self.fold_id}: subjects in both train and test: {sorted(overlap)}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 40
    lr0: float = 1e-3
    gamma: float = 0.8
    window_sec: float = 4.0
    stride_fraction: float = 0.5
    val_fraction: float = 0.2
    minutes_per_subject: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.minutes_per_subject is not None and self.minutes_per_subject <= 0:
            raise ValueError("minutes_per_subject must be positive when set")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


@dataclass
class TrainReport:
    fold_id: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float | None = None
    wall_time: float = 0.0
    n_train_windows: int = 0
    n_val_windows: int = 0
    test_mse: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class EvalResult:
    per_subject: dict
    mean: float
    stderr: float


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


# -- folds -----------------------------------------------------------------------------


def make_folds(subjects, k: int, seed: int = 0) -> list[FoldSpec]:
    """Split subjects into ``k`` test groups of near-equal size after a seeded shuffle."""
    subjects = sorted(set(subjects))
    if not 2 <= k <= len(subjects):
        raise ValueError(f"k must be in [2, {len(subjects)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = np.array_split(order, k)
    folds = []
    for i, grp in enumerate(groups):
        test = tuple(sorted(subjects[j] for j in grp))
        train = tuple(s for s in subjects if s not in test)
        folds.append(FoldSpec(i, train, test))
    return folds


# -- datasets -----------------------------------------------------------------------------

NOISY_TAGS = ("noisy", "raw")
REFERENCE_TAGS = ("reference", "clean")


def load_dataset(directory) -> Dataset:
    """Pair ``<subject>_noisy.eegr`` with ``<subject>_reference.eegr`` (or ``_raw``/``_clean``)."""
    directory = Path(directory)
    found: dict = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in (".eegr", ".csv") or "_" not in path.stem:
            continue
        sid, tag = path.stem.rsplit("_", 1)
        if tag in NOISY_TAGS:
            found.setdefault(sid, {})["noisy"] = path
        elif tag in REFERENCE_TAGS:
            found.setdefault(sid, {})["reference"] = path
    dataset = {}
    for sid, paths in sorted(found.items()):
        if "noisy" not in paths:
            raise FileNotFoundError(f"subject {sid}: reference without a noisy recording in {directory}")
        ref = load_recording(paths["reference"], subject_id=sid) if "reference" in paths else None
        dataset[sid] = (load_recording(paths["noisy"], subject_id=sid), ref)
    if not dataset:
        raise FileNotFoundError(f"no recordings found in {directory}")
    return dataset


def _pair(dataset: Dataset, sid: str):
    if sid not in dataset:
        raise KeyError(f"subject {sid!r} not in dataset")
    noisy, ref = dataset[sid]
    if ref is None:
        raise ValueError(f"subject {sid!r} has no reference recording")
    return noisy, ref


def _cap(rec: Recording, minutes):
    if minutes is None:
        return rec
    n = int(round(minutes * 60 * rec.fs))
    if n > rec.n_samples:
        raise ValueError(
            f"subject {rec.subject_id}: {minutes} min requested, only {rec.n_samples / rec.fs / 60:.3g} available")
    return rec.head(n)


def collect_windows(dataset: Dataset, subjects, cfg: TrainConfig):
    """Stacked (noisy, reference) windows and a per-window subject tag."""
    pairs = []
    for sid in subjects:
        noisy, ref = _pair(dataset, sid)
        pairs += segment_windows(_cap(noisy, cfg.minutes_per_subject), _cap(ref, cfg.minutes_per_subject),
                                 cfg.window_sec, cfg.stride_fraction)
    if not pairs:
        raise TrainingError("no training windows: recordings shorter than one window")
    x, y = stack_windows(pairs)
    tags = np.array([p.subject_id for p in pairs])
    return x, y, tags


# -- training -----------------------------------------------------------------------------


def _seed_streams(seed):
    # split, init, shuffle
    return np.random.SeedSequence(seed).spawn(3)


def split_indices(n_windows: int, cfg: TrainConfig):
    """Seeded (train, validation) window indices, both sorted."""
    order = np.random.default_rng(_seed_streams(cfg.seed)[0]).permutation(n_windows)
    n_val = max(1, int(round(cfg.val_fraction * n_windows)))
    if n_val >= n_windows:
        raise TrainingError(f"only {n_windows} windows, too few to hold out a validation set")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def batched_loss(model: CleegnModel, x, y, batch_size=64) -> float:
    """Infer-mode MSE over all windows."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = model(x[i:i + batch_size])
        total += float(np.sum(np.square(out - y[i:i + batch_size], dtype=np.float64)))
    return total / y.size


def train_fold(dataset: Dataset, fold: FoldSpec, cfg: TrainConfig, model_config: CleegnConfig | None = None,
               checkpoint_dir=None) -> tuple[CleegnModel, TrainReport]:
    """Train on the fold's training subjects and return the best-validation model.

    Parameters
    ----------
    dataset : dict
        Subject id to ``(noisy, reference)`` recordings.
    fold : FoldSpec
    cfg : TrainConfig
    model_config : CleegnConfig, optional
        Defaults to one built from the data's channel count and sampling rate.
    checkpoint_dir : path, optional
        Where ``fold<k>-best.clgn`` is written.

    Returns
    -------
    model : CleegnModel
        Snapshot taken at the epoch with the lowest validation loss.
    report : TrainReport
    """
    t_start = time.perf_counter()
    if not fold.train_subjects:
        raise TrainingError(f"fold {fold.fold_id} has no training subjects")
    x, y, tags = collect_windows(dataset, fold.train_subjects, cfg)
    leaked = set(tags.tolist()) & set(fold.test_subjects)
    assert not leaked, f"test subjects in training windows: {leaked}"
    if model_config is None:
        first = dataset[fold.train_subjects[0]][0]
        model_config = CleegnConfig(first.n_channels, first.fs, window_sec=cfg.window_sec)

    _, init_ss, shuffle_ss = _seed_streams(cfg.seed)
    train_idx, val_idx = split_indices(len(x), cfg)
    n_val = len(val_idx)
    x_tr, y_tr, x_val, y_val = x[train_idx], y[train_idx], x[val_idx], y[val_idx]
    # drop the trailing partial batch, unless it is the only batch there is
    batch = min(cfg.batch_size, len(x_tr))
    n_batches = len(x_tr) // batch

    model = build_model(model_config, seed=int(init_ss.generate_state(1)[0]))
    params = model.params()
    adam = AdamState.for_params(params)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    report = TrainReport(fold.fold_id, n_train_windows=len(x_tr), n_val_windows=n_val, config=asdict(cfg))
    best = model.copy()

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr0, cfg.gamma)
        perm = shuffle_rng.permutation(len(x_tr))
        if lr == 0:
            # nothing can move; avoid nudging BN running statistics
            train_loss = batched_loss(model, x_tr, y_tr)
        else:
            losses = []
            for b in range(n_batches):
                idx = perm[b * batch:(b + 1) * batch]
                out, cache = forward(model, x_tr[idx], "train")
                loss, grad = mse_loss(out, y_tr[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b} (lr={lr:g})")
                grads, _ = backward(model, cache, grad)
                try:
                    adam_step(params, grads, adam, lr)
                except NonFiniteGradientError as exc:
                    raise TrainingError(f"{exc} at epoch {epoch}, batch {b} (lr={lr:g})") from exc
                model.mark_updated()
                losses.append(loss)
            train_loss = float(np.mean(losses))
        val_loss = batched_loss(model, x_val, y_val)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if report.best_val_loss is None or val_loss < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val_loss, epoch
            best = model.copy()
        log.info("fold %d epoch %d lr %.3g train %.5g val %.5g", fold.fold_id, epoch, lr, train_loss, val_loss)

    report.wall_time = time.perf_counter() - t_start
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"fold{fold.fold_id}-best.clgn"
        path.parent.mkdir(parents=True, exist_ok=True)
        best_val = math.nan if report.best_val_loss is None else report.best_val_loss
        save_checkpoint_file(path, best, CheckpointMeta(max(report.best_epoch, 0), best_val, cfg.seed))
    return best, report


# -- evaluation ---------------------------------------------------------------------------


def recording_mse(a: Recording, b: Recording) -> float:
    if a.samples.shape != b.samples.shape:
        raise ValueError(f"shape mismatch {a.samples.shape} vs {b.samples.shape}")
    return float(np.mean((a.samples - b.samples) ** 2))


def evaluate_fold(model: CleegnModel, dataset: Dataset, fold: FoldSpec,
                  policy=MergePolicy.LATEST_HOP) -> EvalResult:
    """Reconstruct every test subject's full recording and score it against its reference."""
    per = {}
    for sid in fold.test_subjects:
        noisy, ref = _pair(dataset, sid)
        per[sid] = recording_mse(offline_reconstruct(model, noisy, policy), ref)
    mean, se = mean_stderr(per.values())
    return EvalResult(per, mean, se)


def _run_fold(dataset, fold, cfg, model_config, checkpoint_dir):
    model, rep = train_fold(dataset, fold, cfg, model_config, checkpoint_dir)
    rep.test_mse = evaluate_fold(model, dataset, fold).per_subject
    return rep


def cross_validate(dataset: Dataset, k: int, cfg: TrainConfig, checkpoint_dir=None, model_config=None,
                   jobs: int = 1):
    """Train and evaluate every fold, up to ``jobs`` folds at a time in separate processes.

    Returns ``(reports, per-subject test MSE)``; results do not depend on ``jobs``.
    """
    folds = make_folds(list(dataset), k, cfg.seed)
    args = [(dataset, f, cfg, model_config, checkpoint_dir) for f in folds]
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(folds))) as pool:
            reports = list(pool.map(_run_fold, *zip(*args)))
    else:
        reports = [_run_fold(*a) for a in args]
    per = {}
    for rep in reports:
        per.update(rep.test_mse)
    return reports, per


# -- ablations ----------------------------------------------------------------------------

ABLATION_AXES = ("minutes_per_subject", "n_subjects")


def ablation_driver(dataset: Dataset, axis: str, values, cfg: TrainConfig, k: int = 2,
                    n_draws: int = 3, out_csv=None) -> list[tuple]:
    """Test MSE as a function of training-data size.

    ``minutes_per_subject`` caps every training recording to its first minutes
    (``None`` means the full recording). ``n_subjects`` keeps a seeded random
    subset of each fold's training subjects, repeated ``n_draws`` times.
    Returns rows of ``(value, mean MSE, stderr)``.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    folds = make_folds(list(dataset), k, cfg.seed)
    rows = []
    for value in values:
        scores = []
        if axis == "minutes_per_subject":
            run_cfg = _replace(cfg, minutes_per_subject=value)
            for fold in folds:
                model, _ = train_fold(dataset, fold, run_cfg)
                scores += evaluate_fold(model, dataset, fold).per_subject.values()
        else:
            n = int(value)
            for fold in folds:
                if not 1 <= n <= len(fold.train_subjects):
                    raise ValueError(
                        f"n_subjects={n} exceeds the {len(fold.train_subjects)} training subjects of fold {fold.fold_id}")
            rng = np.random.default_rng(cfg.seed)
            for draw in range(n_draws):
                draw_scores = []
                for fold in folds:
                    pick = tuple(sorted(rng.choice(fold.train_subjects, size=n, replace=False).tolist()))
                    sub = FoldSpec(fold.fold_id, pick, fold.test_subjects)
                    model, _ = train_fold(dataset, sub, _replace(cfg, seed=cfg.seed + draw))
                    draw_scores += evaluate_fold(model, dataset, sub).per_subject.values()
                scores.append(float(np.mean(draw_scores)))
        mean, se = mean_stderr(scores)
        rows.append((value, mean, se))
        log.info("%s=%s mean %.5g stderr %.3g", axis, value, mean, se)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, "mean_mse", "stderr"])
            for value, mean, se in rows:
                w.writerow(["full" if value is None else value, repr(mean), repr(se)])
    return rows


def _replace(cfg: TrainConfig, **changes) -> TrainConfig:
    d = asdict(cfg)
    d.update(changes)
    return TrainConfig(**d)
