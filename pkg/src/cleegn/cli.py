"""Command-line entry point: ``cleegn <command> [options]``.

Every command accepts ``--config FILE`` with ``key = value`` lines (``#``
starts a comment). Keys are option names, optionally prefixed by a command
(``train.epochs = 10``); keys for other commands are skipped so one file can
serve a whole pipeline. Flags given on the command line win over the file.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    LATENT_LAYERS,
    epoched_fitness,
    fit_pca_basis,
    mse_fitness,
    project_latents,
    welch_psd,
    write_json,
    write_projections_csv,
)
from .data import (
    SynthSpec,
    bandpass_fir,
    car_reference,
    downsample,
    extract_epochs,
    load_events,
    load_recording,
    save_recording,
    synth_subject,
)
from .harness import TrainConfig, cross_validate, load_dataset, mean_stderr
from .model import CleegnConfig, layer_shapes, load_checkpoint_file, param_count
from .streaming import MergePolicy, offline_reconstruct, stream_init, stream_push

log = logging.getLogger("cleegn")


class CliError(Exception):
    """A user-facing failure; reported without a traceback."""


def _default_seed() -> int:
    raw = os.environ.get("CLEEGN_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"CLEEGN_SEED must be an integer, got {raw!r}") from None


def _optional_float(s):
    return None if s.lower() in ("", "none", "full") else float(s)


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cleegn", description="EEG artifact removal with a compact convolutional autoencoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", type=Path, help="key = value file; flags override its entries")
        p.set_defaults(_required=[])
        return p

    def required(p, *flags, **kwargs):
        # enforced after merging the config file, which may supply it
        kwargs["help"] = ("(required) " + kwargs.get("help", "")).strip()
        action = p.add_argument(*flags, **kwargs)
        p.get_default("_required").append(action)

    p = command("synth", "Write synthetic (noisy, clean) EEGR pairs with known ground truth.")
    required(p, "--out", type=Path, help="output directory")
    p.add_argument("--subjects", type=int, default=8, help="number of subjects")
    p.add_argument("--duration", type=float, default=300.0, help="seconds per subject")
    p.add_argument("--channels", type=int, default=8, help="channel count")
    p.add_argument("--fs", type=float, default=128.0, help="sampling rate (Hz)")
    p.add_argument("--seed", type=int, default=seed, help="base seed (env CLEEGN_SEED)")
    p.add_argument("--blinks-per-min", type=float, default=SynthSpec.blinks_per_min, help="ocular events per minute")
    p.add_argument("--emg-per-min", type=float, default=SynthSpec.emg_per_min, help="muscle bursts per minute")
    p.add_argument("--background-uv", type=float, default=SynthSpec.background_uv, help="clean RMS (µV)")
    p.add_argument("--blink-uv-min", type=float, default=SynthSpec.blink_uv[0], help="smallest blink peak (µV)")
    p.add_argument("--blink-uv-max", type=float, default=SynthSpec.blink_uv[1], help="largest blink peak (µV)")
    p.add_argument("--emg-uv", type=float, default=SynthSpec.emg_uv, help="muscle burst RMS (µV)")
    p.add_argument("--line-noise", action=argparse.BooleanOptionalAction, default=False, help="add a 50 Hz tone")
    p.add_argument("--line-uv", type=float, default=SynthSpec.line_uv, help="line tone amplitude (µV)")
    p.add_argument("--format", choices=("eegr", "csv"), default="eegr", help="output file format")

    p = command("preprocess", "Downsample, re-reference to the common average and band-pass a recording.")
    required(p, "--in", dest="input", type=Path)
    required(p, "--out", type=Path)
    p.add_argument("--target-fs", type=float, default=None, help="resample to this rate (integer factor)")
    p.add_argument("--car", action=argparse.BooleanOptionalAction, default=True, help="common average reference")
    p.add_argument("--lo", type=float, default=1.0, help="pass band low edge (Hz)")
    p.add_argument("--hi", type=float, default=40.0, help="pass band high edge (Hz)")
    p.add_argument("--taps", type=int, default=513, help="FIR length (odd)")
    p.add_argument("--events", type=Path, default=None, help="event CSV for epoching")
    p.add_argument("--t0", type=float, default=0.0, help="epoch start relative to event (s)")
    p.add_argument("--t1", type=float, default=1.25, help="epoch end relative to event (s)")
    p.add_argument("--epochs-out", type=Path, default=None, help="write epochs to this .npz")

    p = command("train", "Subject-disjoint k-fold training with best-validation checkpoints.")
    required(p, "--data", type=Path, help="directory of <subject>_noisy/_reference files")
    p.add_argument("--out", type=Path, default=Path("."), help="writes models/fold<k>-best.clgn and report.json here")
    p.add_argument("--folds", type=int, default=4, help="cross-validation folds")
    p.add_argument("--seed", type=int, default=seed, help="run seed (env CLEEGN_SEED)")
    p.add_argument("--minutes", type=_optional_float, default=None, help="use only the first minutes per subject")
    p.add_argument("--batch", type=int, default=TrainConfig.batch_size, help="mini-batch size")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=TrainConfig.lr0, help="initial learning rate")
    p.add_argument("--gamma", type=float, default=TrainConfig.gamma, help="per-epoch learning-rate decay")
    p.add_argument("--window", type=float, default=TrainConfig.window_sec, help="window length (s)")
    p.add_argument("--stride", type=float, default=TrainConfig.stride_fraction, help="stride as a fraction of the window")
    p.add_argument("--val-fraction", type=float, default=TrainConfig.val_fraction, help="share of training windows held out")
    p.add_argument("--filters", type=int, default=None, help="temporal filter count (default: channel count)")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")

    p = command("reconstruct", "Run a trained model over a recording (use '-' for raw f32 frames on stdin/stdout).")
    required(p, "--model", type=Path)
    required(p, "--in", dest="input", help="EEGR/CSV file or '-'")
    required(p, "--out", help="EEGR/CSV file or '-'")
    p.add_argument("--policy", choices=[m.value for m in MergePolicy], default=MergePolicy.LATEST_HOP.value,
                   help="how overlapping window outputs are merged")

    p = command("eval", "Mean squared error of a reconstruction against a reference.")
    required(p, "--recon", type=Path)
    required(p, "--reference", type=Path)
    p.add_argument("--json", type=Path, default=None, help="also write metrics here")
    p.add_argument("--events", type=Path, default=None,
                   help="score only event-locked epochs from this CSV instead of the whole recording")
    p.add_argument("--t0", type=float, default=0.0, help="epoch start relative to event (s)")
    p.add_argument("--t1", type=float, default=1.25, help="epoch end relative to event (s)")

    p = command("psd", "Welch power spectral density per channel, as CSV.")
    required(p, "--in", dest="input", type=Path)
    required(p, "--out", type=Path)
    p.add_argument("--segment", type=float, default=2.0, help="segment length (s)")
    p.add_argument("--overlap", type=float, default=0.5, help="segment overlap fraction")
    p.add_argument("--window", default="hann", help="scipy window name")

    p = command("pca", "Project channels and latent feature maps onto the channels' two principal axes.")
    required(p, "--in", dest="input", type=Path, help="noisy recording")
    required(p, "--out", type=Path, help="CSV of x,y,layer,row")
    p.add_argument("--start", type=int, default=0, help="segment start sample")
    p.add_argument("--stop", type=int, default=None, help="segment stop sample (default: start + one window)")
    p.add_argument("--model", type=Path, default=None, help="checkpoint, needed for layers above 0")
    p.add_argument("--layers", default="0", help=f"comma-separated indices into {', '.join(LATENT_LAYERS)}")
    p.add_argument("--json", type=Path, default=None, help="write the basis summary here")

    p = command("info", "Print the layer shapes and learnable-parameter count of a configuration.")
    p.add_argument("--channels", type=int, default=56, help="channel count")
    p.add_argument("--fs", type=float, default=128.0, help="sampling rate (Hz)")
    p.add_argument("--filters", type=int, default=None, help="default: channel count")
    p.add_argument("--window", type=float, default=4.0, help="window length (s)")
    p.add_argument("--model", type=Path, default=None, help="read the configuration from a checkpoint")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name], action.choices
    raise KeyError(name)


def _option_actions(p):
    return {a.dest: a for a in p._actions if a.dest not in ("help", "config", "_required")}


def read_config(path) -> list[tuple[int, str, str]]:
    entries = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key, value))
    return entries


def _convert(action, raw, where):
    if isinstance(action, argparse.BooleanOptionalAction) or action.nargs == 0:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"{where}: {action.dest} expects a boolean, got {raw!r}")
    try:
        value = action.type(raw) if action.type else raw
    except (TypeError, ValueError) as exc:
        raise CliError(f"{where}: bad value for {action.dest}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise CliError(f"{where}: {action.dest} must be one of {list(action.choices)}, got {raw!r}")
    return value


def apply_config(parser, args, argv):
    """Re-parse ``argv`` with config-file entries installed as defaults."""
    sub, all_subs = _subparser(parser, args.command)
    actions = _option_actions(sub)
    defaults = {}
    for lineno, key, raw in read_config(args.config):
        where = f"{args.config}:{lineno}"
        prefix, _, name = key.rpartition(".")
        name = name.replace("-", "_")
        if prefix and prefix != args.command:
            if prefix in all_subs and name in _option_actions(all_subs[prefix]):
                continue
            raise CliError(f"{where}: unknown key {key!r}")
        if name not in actions:
            raise CliError(f"{where}: unknown key {key!r} for command {args.command!r}")
        defaults[name] = _convert(actions[name], raw, where)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def check_required(parser, args):
    sub, _ = _subparser(parser, args.command)
    missing = [a.option_strings[0] for a in args._required if getattr(args, a.dest) is None]
    if missing:
        sub.error(f"the following arguments are required: {', '.join(missing)}")


# keys listed first in the resolved config, in this order; the rest follow alphabetically
LEADING_KEYS = {"train": ("batch", "epochs", "lr", "gamma")}


def resolved_config(args) -> dict:
    values = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("command", "config", "log_level", "_required")}
    lead = LEADING_KEYS.get(args.command, ())
    return {k: values[k] for k in (*lead, *sorted(set(values) - set(lead)))}


def _log_config(args, cfg):
    log.info("resolved config: %s %s", args.command, " ".join(f"{k}={v}" for k, v in cfg.items()))


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args, cfg):
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.subjects):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        spec = SynthSpec(
            n_channels=args.channels, fs=args.fs, duration_sec=args.duration, seed=seed,
            blinks_per_min=args.blinks_per_min, emg_per_min=args.emg_per_min,
            background_uv=args.background_uv, blink_uv=(args.blink_uv_min, args.blink_uv_max),
            emg_uv=args.emg_uv, line_noise=args.line_noise, line_uv=args.line_uv,
        )
        noisy, clean = synth_subject(spec)
        sid = f"s{i:02d}"
        ext = args.format
        save_recording(noisy.replace(subject_id=sid), args.out / f"{sid}_noisy.{ext}")
        save_recording(clean.replace(subject_id=sid), args.out / f"{sid}_clean.{ext}")
    log.info("wrote %d subject pairs to %s", args.subjects, args.out)


def cmd_preprocess(args, cfg):
    rec = load_recording(args.input)
    if args.target_fs is not None and args.target_fs != rec.fs:
        factor = rec.fs / args.target_fs
        if abs(factor - round(factor)) > 1e-9:
            raise CliError(f"cannot reach {args.target_fs} Hz from {rec.fs} Hz with an integer factor")
        rec = downsample(rec, int(round(factor)))
    if args.car:
        rec = car_reference(rec)
    rec = bandpass_fir(rec, args.lo, args.hi, args.taps)
    save_recording(rec, args.out)
    if args.events is not None:
        epochs, skipped = extract_epochs(rec, load_events(args.events), args.t0, args.t1)
        if args.epochs_out is not None:
            labels = np.array([lab for lab, _ in epochs], dtype=np.int64)
            data = np.stack([m for _, m in epochs]) if epochs else np.zeros((0, rec.n_channels, 0))
            np.savez(args.epochs_out, labels=labels, epochs=data, skipped=np.array(skipped, dtype=np.int64))
        log.info("extracted %d epochs, skipped %d", len(epochs), len(skipped))


def cmd_train(args, cfg):
    dataset = load_dataset(args.data)
    first = next(iter(dataset.values()))[0]
    train_cfg = TrainConfig(
        batch_size=args.batch, epochs=args.epochs, lr0=args.lr, gamma=args.gamma, window_sec=args.window,
        stride_fraction=args.stride, val_fraction=args.val_fraction, minutes_per_subject=args.minutes,
        seed=args.seed,
    )
    model_cfg = CleegnConfig(first.n_channels, first.fs, args.filters, args.window)
    models_dir = args.out / "models"
    reports, per = cross_validate(dataset, args.folds, train_cfg, models_dir, model_cfg, jobs=args.jobs)
    mean, se = mean_stderr(per.values())
    report = {
        "config": cfg,
        "folds": [asdict(r) for r in reports],
        "per_subject_mse": per,
        "mean_mse": mean,
        "stderr_mse": se,
    }
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(report, args.out / "report.json")
    log.info("mean test MSE %.5g ± %.3g over %d subjects", mean, se, len(per))


def _raw_stream(model, fin, fout):
    c = model.config.n_channels
    state = stream_init(model, model.config.fs)
    frame_bytes = 4 * c
    block = frame_bytes * state.hop
    pending = b""
    while True:
        data = fin.read(block)
        if not data:
            break
        pending += data
        usable = len(pending) - len(pending) % frame_bytes
        frames = np.frombuffer(pending[:usable], dtype="<f4").reshape(-1, c)
        pending = pending[usable:]
        out = stream_push(state, frames.T)
        if out.shape[1]:
            fout.write(np.ascontiguousarray(out.T, dtype="<f4").tobytes())
            fout.flush()
    if pending:
        raise CliError(f"input ended with a partial frame of {len(pending)} bytes")


def cmd_reconstruct(args, cfg):
    model, _ = load_checkpoint_file(args.model)
    if args.input == "-" or args.out == "-":
        if args.input != "-" or args.out != "-":
            raise CliError("raw frame mode needs both --in - and --out -")
        if args.policy != MergePolicy.LATEST_HOP.value:
            raise CliError("raw frame mode streams, so only the latest_hop policy is available")
        _raw_stream(model, sys.stdin.buffer, sys.stdout.buffer)
        return
    rec = load_recording(args.input)
    save_recording(offline_reconstruct(model, rec, args.policy), args.out)


def cmd_eval(args, cfg):
    recon, reference = load_recording(args.recon), load_recording(args.reference)
    if args.events is None:
        fit = mse_fitness(recon, reference)
    else:
        fit = epoched_fitness(recon, reference, load_events(args.events), args.t0, args.t1)
    print(f"overall_mse={fit.overall:.6g}")
    for name, v in zip(fit.channel_names, fit.per_channel):
        print(f"{name}\t{v:.6g}")
    if args.json is not None:
        write_json({"config": cfg, **fit.to_dict()}, args.json)


def cmd_psd(args, cfg):
    psd = welch_psd(load_recording(args.input), args.segment, args.overlap, args.window)
    psd.write_csv(args.out)


def cmd_pca(args, cfg):
    rec = load_recording(args.input)
    layers = [int(s) for s in str(args.layers).split(",") if s.strip()]
    model = load_checkpoint_file(args.model)[0] if args.model is not None else None
    stop = args.stop
    if stop is None:
        stop = args.start + (model.config.window_len if model is not None else int(4 * rec.fs))
    segment = (args.start, stop)
    basis = fit_pca_basis(rec, segment)
    projections = []
    for layer in layers:
        if layer > 0 and model is None:
            raise CliError(f"layer {layer} needs --model")
        projections.append(project_latents(model, rec, basis, layer, segment))
    write_projections_csv(projections, args.out)
    summary = {"config": cfg, "segment": list(segment), "explained_variance": basis.explained.tolist(),
               "points_per_layer": {LATENT_LAYERS[p.layer]: int(len(p.rows)) for p in projections}}
    if args.json is not None:
        write_json(summary, args.json)
    log.info("explained variance of the two axes: %s", np.round(basis.explained, 4).tolist())


def cmd_info(args, cfg):
    if args.model is not None:
        model, meta = load_checkpoint_file(args.model)
        mc = model.config
        print(f"checkpoint: epoch={meta.epoch} val_loss={meta.val_loss:.6g} seed={meta.seed}")
    else:
        mc = CleegnConfig(args.channels, args.fs, args.filters, args.window)
    print(f"channels={mc.n_channels} fs={mc.fs:g} window={mc.window_len} k={mc.kernel_width} n_filters={mc.n_filters}")
    for name, shape in layer_shapes(mc):
        print(f"  {name:<13} {shape}")
    print(f"learnable parameters: {param_count(mc)}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "psd": cmd_psd,
    "pca": cmd_pca,
    "info": cmd_info,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
        if args.config is not None:
            args = apply_config(parser, args, argv)
        check_required(parser, args)
        cfg = resolved_config(args)
        _log_config(args, cfg)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"cleegn: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"cleegn {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
