"""Command-line entry point: ``remind <command> [options]``.

Option precedence is built-in defaults, then the JSON ``--config`` file, then
flags given on the command line. Every command that writes results also
writes ``run.json`` whose ``config`` block holds the fully resolved options;
passing that file back through ``--config`` replays the run.

Exit status is 0 on success, 2 for usage errors (bad flags, missing files,
contradictory settings) and 1 for numeric failures during a run.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .corruption import CorruptionSpec, apply
from .data import (
    DatasetManifest,
    MetricsReport,
    dump_json,
    generate_synthetic,
    load_recordings,
    threads_from_env,
    write_recording,
)
from .errors import (
    ConvergenceError,
    DegenerateChannelError,
    DegenerateMapError,
    NotPositiveDefiniteError,
    NumericError,
    RemindError,
)
from .experiment import ExperimentConfig, cross_validate, evaluate
from .frontend import ElectrodeLayout, Recording
from .model import ModelConfig, ParamSet
from .training import TrainConfig, finetune, pretrain, stratified_label_sample

log = logging.getLogger("remind")

RUNTIME_ERRORS = (NumericError, ConvergenceError, NotPositiveDefiniteError, DegenerateMapError,
                  DegenerateChannelError)

# minimum subject-accuracy gain of pre-training over scratch flagged by xval
SSL_MARGIN = 0.05

DEFAULTS = {
    # dataset generation
    "subjects_per_class": 20,
    "channels": 8,
    "samples": 512,
    "recordings_per_subject": 4,
    "delta": 0.4,
    "rho": 0.3,
    "sampling_rate": 250.0,
    # model
    "segments": 8,
    "d_enc": 8,
    "kernel": 15,
    "gamma": 1e-3,
    "eps": 1e-6,
    "width_mult": 4,
    "classes": 2,
    "activation": "tanh",
    "no_filter": False,
    "no_position": False,
    "jitter": 0.0,
    # pre-training
    "pretrain_epochs": 10,
    "pretrain_batch_size": 8,
    "pretrain_lr": 1e-3,
    "loss_domain": "log",
    "mix": "1,1,1",
    "mask_rate": 0.5,
    "fixed_masks": False,
    # fine-tuning
    "finetune_epochs": 200,
    "finetune_batch_size": 64,
    "finetune_lr": 1e-3,
    "encoder_step_mult": 0.1,
    "label_fraction": 0.10,
    "freeze_encoder": False,
    # experiment
    "folds": 3,
    "no_ssl": False,
    "compare_scratch": False,
    "corrupt": "kind=none",
    "workers": None,
    "checkpoint": None,
    "layout": None,
    "data": None,
    "seed": None,
}

SEEDED = ("generate", "pretrain", "finetune", "eval", "xval", "corrupt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- parser


def _add_common(p, data=True):
    p.add_argument("--config", help="JSON file of option values (flags override it)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", default=None, help="dataset directory with manifest.json")
        p.add_argument("--layout", default=None, help="electrode layout CSV (default DATA/layout.csv)")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--segments", type=int, default=None, help="states per recording")
    g.add_argument("--d-enc", type=int, default=None, help="position encoding size per axis")
    g.add_argument("--kernel", type=int, default=None, help="temporal kernel length (odd)")
    g.add_argument("--gamma", type=float, default=None, help="correlation shrinkage")
    g.add_argument("--eps", type=float, default=None, help="eigenvalue floor")
    g.add_argument("--width-mult", type=int, default=None, help="head width as a multiple of d")
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--activation", choices=("tanh", "none"), default=None)
    g.add_argument("--no-filter", action="store_true", default=None, help="ablate the filter")
    g.add_argument("--no-position", action="store_true", default=None,
                   help="ablate the position encoding")
    g.add_argument("--jitter", type=float, default=None,
                   help="seeded Gaussian jitter added before correlation")


def _add_pretrain(p):
    g = p.add_argument_group("pre-training")
    g.add_argument("--pretrain-epochs", type=int, default=None)
    g.add_argument("--pretrain-batch-size", type=int, default=None)
    g.add_argument("--pretrain-lr", type=float, default=None)
    g.add_argument("--loss-domain", choices=("log", "euclid"), default=None)
    g.add_argument("--mix", default=None, help="random,segment,channel mask weights")
    g.add_argument("--mask-rate", type=float, default=None)
    g.add_argument("--fixed-masks", action="store_true", default=None,
                   help="draw one mask per recording for the whole run")


def _add_finetune(p):
    g = p.add_argument_group("fine-tuning")
    g.add_argument("--finetune-epochs", type=int, default=None)
    g.add_argument("--finetune-batch-size", type=int, default=None)
    g.add_argument("--finetune-lr", type=float, default=None)
    g.add_argument("--encoder-step-mult", type=float, default=None)
    g.add_argument("--label-fraction", type=float, default=None)
    g.add_argument("--freeze-encoder", action="store_true", default=None)


def build_parser():
    parser = _Parser(prog="remind", description="Riemannian state reconstruction for EEG")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic two-class dataset")
    _add_common(p, data=False)
    p.add_argument("--subjects-per-class", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--recordings-per-subject", type=int, default=None)
    p.add_argument("--delta", type=float, default=None, help="class gap in block correlation")
    p.add_argument("--rho", type=float, default=None, help="class-0 block correlation")
    p.add_argument("--sampling-rate", type=float, default=None)

    p = sub.add_parser("pretrain", help="self-supervised stage on unlabeled recordings")
    _add_common(p)
    _add_model(p)
    _add_pretrain(p)

    p = sub.add_parser("finetune", help="supervised stage on a labeled fraction")
    _add_common(p)
    _add_model(p)
    _add_finetune(p)
    p.add_argument("--checkpoint", default=None, help="pre-trained checkpoint (omit for scratch)")

    p = sub.add_parser("eval", help="score a checkpoint")
    _add_common(p)
    _add_model(p)
    p.add_argument("--checkpoint", default=None, required=False)
    p.add_argument("--corrupt", default=None, help="test corruption, e.g. kind=segment")

    p = sub.add_parser("xval", help="subject-level cross-validation of both stages")
    _add_common(p)
    _add_model(p)
    _add_pretrain(p)
    _add_finetune(p)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--no-ssl", action="store_true", default=None, help="skip pre-training")
    p.add_argument("--compare-scratch", action="store_true", default=None,
                   help="also train from scratch on the same labels")
    p.add_argument("--corrupt", default=None, help="test corruption, e.g. kind=segment")
    p.add_argument("--workers", type=int, default=None, help="fold workers (capped by REMIND_THREADS)")

    p = sub.add_parser("corrupt", help="write corrupted copies of a dataset")
    _add_common(p)
    p.add_argument("--corrupt", default=None, help="corruption spec, e.g. kind=channel,channels=0+1")

    p = sub.add_parser("report", help="render metrics.json as a text table")
    p.add_argument("metrics", help="metrics.json written by eval or xval")
    p.add_argument("--out", default=None, help="also write metrics.txt here")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------- options


def _read_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def resolve_options(args):
    """Defaults, then config file, then explicit flags, restricted to the
    options the command accepts."""
    accepted = [k for k in DEFAULTS if hasattr(args, k)]
    opts = {k: DEFAULTS[k] for k in accepted}
    if getattr(args, "config", None):
        for k, v in _read_config(args.config).items():
            if k in opts:
                opts[k] = v
    for k in accepted:
        v = getattr(args, k)
        if v is not None:
            opts[k] = v
    if args.command in SEEDED and opts.get("seed") is None:
        raise UsageError(f"{args.command} needs --seed (or a seed in the config file)")
    return opts


def _parse_mix(text):
    try:
        weights = tuple(float(w) for w in str(text).split(","))
    except ValueError:
        raise UsageError(f"mask weights must be three numbers, got {text!r}")
    if len(weights) != 3:
        raise UsageError(f"mask weights must be three numbers, got {text!r}")
    return weights


def _corruption(opts, n_channels):
    spec = CorruptionSpec.parse(opts["corrupt"], seed=opts["seed"])
    if spec.kind == "channel" and any(c >= n_channels for c in spec.channels):
        raise UsageError(f"corrupted channel index out of range for C={n_channels}")
    return spec


def _dataset(opts):
    if not opts.get("data"):
        raise UsageError("--data is required")
    root = Path(opts["data"])
    if not (root / "manifest.json").is_file():
        raise UsageError(f"no manifest.json in {root}")
    layout_path = Path(opts["layout"]) if opts.get("layout") else root / "layout.csv"
    if not layout_path.is_file():
        raise UsageError(f"layout file not found: {layout_path}")
    manifest = DatasetManifest.load(root)
    layout = ElectrodeLayout.read_csv(layout_path)
    if layout.n_channels != manifest.n_channels:
        raise UsageError(
            f"layout has {layout.n_channels} electrodes, recordings have {manifest.n_channels}"
        )
    return manifest, layout, load_recordings(manifest)


def _model_overrides(opts):
    return dict(
        activation=None if opts["activation"] == "none" else opts["activation"],
        use_filter=not opts["no_filter"],
        use_position=not opts["no_position"],
        jitter=float(opts["jitter"]),
    )


def _model_config(opts, manifest):
    return ModelConfig(
        n_channels=manifest.n_channels,
        n_samples=manifest.n_samples,
        n_segments=int(opts["segments"]),
        d_enc=int(opts["d_enc"]),
        k_t=int(opts["kernel"]),
        gamma=float(opts["gamma"]),
        eps=float(opts["eps"]),
        width_mult=int(opts["width_mult"]),
        n_classes=int(opts["classes"]),
        **_model_overrides(opts),
    )


def _pretrain_config(opts):
    return TrainConfig(
        stage="pretrain",
        epochs=int(opts["pretrain_epochs"]),
        batch_size=int(opts["pretrain_batch_size"]),
        step_size=float(opts["pretrain_lr"]),
        seed=int(opts["seed"]),
        loss_domain=opts["loss_domain"],
        mix_weights=_parse_mix(opts["mix"]),
        mask_rate=float(opts["mask_rate"]),
        resample_masks=not opts["fixed_masks"],
    )


def _finetune_config(opts):
    return TrainConfig(
        stage="finetune",
        epochs=int(opts["finetune_epochs"]),
        batch_size=int(opts["finetune_batch_size"]),
        step_size=float(opts["finetune_lr"]),
        encoder_step_mult=float(opts["encoder_step_mult"]),
        seed=int(opts["seed"]),
        label_fraction=float(opts["label_fraction"]),
        freeze_encoder=bool(opts["freeze_encoder"]),
    )


def _load_model(opts, manifest):
    path = opts.get("checkpoint")
    if not path:
        return None, _model_config(opts, manifest)
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    params, cfg = load_checkpoint(path, **_model_overrides(opts))
    if (cfg.n_channels, cfg.n_samples) != (manifest.n_channels, manifest.n_samples):
        raise UsageError(
            f"checkpoint expects {cfg.n_channels} x {cfg.n_samples} recordings, dataset has "
            f"{manifest.n_channels} x {manifest.n_samples}"
        )
    return params, cfg


def _write_run(out, command, opts, **sections):
    doc = {"command": command, "version": __version__, "config": opts}
    doc.update({k: v for k, v in sections.items() if v is not None})
    dump_json(doc, out / "run.json")


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text + "\n")


# ---------------------------------------------------------------- commands


def cmd_generate(opts, out):
    manifest = generate_synthetic(
        out, int(opts["seed"]),
        subjects_per_class=int(opts["subjects_per_class"]),
        n_channels=int(opts["channels"]),
        n_samples=int(opts["samples"]),
        n_recordings=int(opts["recordings_per_subject"]),
        delta=float(opts["delta"]),
        rho=float(opts["rho"]),
        sampling_rate=float(opts["sampling_rate"]),
    )
    _write_run(out, "generate", opts)
    print(f"wrote {len(manifest.entries)} recordings from {len(manifest.subjects())} subjects "
          f"to {out}")


def cmd_pretrain(opts, out):
    manifest, layout, recordings = _dataset(opts)
    model_cfg = _model_config(opts, manifest)
    train_cfg = _pretrain_config(opts)
    unlabeled = [Recording(r.data, r.sampling_rate, r.subject_id) for r in recordings]
    reads = Recording.label_reads
    init = ParamSet.init(model_cfg, opts["seed"])
    params, losses = pretrain(train_cfg, model_cfg, layout, unlabeled, params=init)
    reads = Recording.label_reads - reads
    save_checkpoint(out / "checkpoint.bin", params, model_cfg)
    dump_json({"losses": losses, "label_reads": reads}, out / "losses.json")
    _write_run(out, "pretrain", opts, model=model_cfg.to_dict(), pretrain=train_cfg.to_dict())
    print(f"pre-trained {train_cfg.epochs} epochs on {len(unlabeled)} recordings; "
          f"loss {losses[0]:.6f} -> {losses[-1]:.6f}")


def cmd_finetune(opts, out):
    manifest, layout, recordings = _dataset(opts)
    params, model_cfg = _load_model(opts, manifest)
    if params is None:
        params = ParamSet.init(model_cfg, opts["seed"])
    train_cfg = _finetune_config(opts)
    chosen = stratified_label_sample(recordings, train_cfg.label_fraction, opts["seed"],
                                     model_cfg.n_classes)
    labeled = [recordings[i] for i in chosen]
    params, losses = finetune(train_cfg, model_cfg, layout, params, labeled)
    save_checkpoint(out / "checkpoint.bin", params, model_cfg)
    dump_json({"losses": losses, "labeled": [manifest.entries[i].file for i in chosen]},
              out / "losses.json")
    _write_run(out, "finetune", opts, model=model_cfg.to_dict(), finetune=train_cfg.to_dict())
    print(f"fine-tuned on {len(labeled)} labeled recordings; "
          f"loss {losses[0]:.6f} -> {losses[-1]:.6f}")


def cmd_eval(opts, out):
    manifest, layout, recordings = _dataset(opts)
    if not opts.get("checkpoint"):
        raise UsageError("eval needs --checkpoint")
    params, model_cfg = _load_model(opts, manifest)
    spec = _corruption(opts, model_cfg.n_channels)
    metrics, _ = evaluate(params, model_cfg, layout, recordings, spec)
    report = MetricsReport([metrics])
    doc = {"corruption": spec.to_dict(), "eval": report.to_dict()}
    dump_json(doc, out / "metrics.json")
    text = render_metrics(doc)
    _write_text(out / "metrics.txt", text)
    _write_run(out, "eval", opts, model=model_cfg.to_dict())
    print(text)


def cmd_xval(opts, out):
    manifest, layout, recordings = _dataset(opts)
    model_cfg = _model_config(opts, manifest)
    spec = _corruption(opts, model_cfg.n_channels)
    cfg = ExperimentConfig(
        model=model_cfg,
        pretrain=_pretrain_config(opts),
        finetune=_finetune_config(opts),
        folds=int(opts["folds"]),
        seed=int(opts["seed"]),
        use_ssl=not opts["no_ssl"],
        test_corruption=spec,
        compare_scratch=bool(opts["compare_scratch"]),
    )
    cap = threads_from_env(default=1)
    workers = min(int(opts["workers"] or cap), cap)
    plan, results, report, scratch = cross_validate(cfg, layout, recordings, manifest, workers)

    overlaps = [len(set(r.train_subjects) & set(r.test_subjects)) for r in results]
    doc = {
        "corruption": spec.to_dict(),
        "ssl" if cfg.use_ssl else "scratch": report.to_dict(),
        "folds": [
            {
                "fold": r.fold,
                "train_subjects": r.train_subjects,
                "test_subjects": r.test_subjects,
                "n_labeled": r.n_labeled,
                "pretrain_losses": r.pretrain_losses,
                "label_reads_during_pretrain": r.label_reads_during_pretrain,
            }
            for r in results
        ],
        "audit": {
            "subject_overlap": overlaps,
            "label_reads_during_pretrain": [r.label_reads_during_pretrain for r in results],
        },
    }
    if scratch is not None and cfg.use_ssl:
        doc["scratch"] = scratch.to_dict()
        ssl_acc = report.summary()["subject_accuracy"]["mean"]
        base_acc = scratch.summary()["subject_accuracy"]["mean"]
        margin = ssl_acc - base_acc
        doc["comparison"] = {
            "ssl_subject_accuracy": ssl_acc,
            "scratch_subject_accuracy": base_acc,
            "margin": margin,
            "required_margin": SSL_MARGIN,
            "flag": "ok" if margin >= SSL_MARGIN else "below_required_margin",
        }
    dump_json(doc, out / "metrics.json")
    text = render_metrics(doc)
    _write_text(out / "metrics.txt", text)
    _write_run(out, "xval", opts, experiment=cfg.to_dict(), folds=plan.to_dict())
    print(text)


def cmd_corrupt(opts, out):
    manifest, layout, recordings = _dataset(opts)
    spec = _corruption(opts, manifest.n_channels)
    seeds = np.random.default_rng(spec.seed).integers(0, 2**31 - 1, size=len(recordings))
    for entry, rec, s in zip(manifest.entries, recordings, seeds):
        corrupted, _ = apply(replace(spec, seed=int(s)), rec)
        target = out / entry.file
        target.parent.mkdir(parents=True, exist_ok=True)
        write_recording(target, corrupted)
    DatasetManifest(out, list(manifest.entries)).save()
    layout.write_csv(out / "layout.csv")
    _write_run(out, "corrupt", opts, corruption=spec.to_dict())
    print(f"corrupted {len(recordings)} recordings ({spec.describe()}) into {out}")


def render_metrics(doc):
    """Aligned text table for a metrics document written by eval or xval."""
    spec = CorruptionSpec(**{k: v for k, v in doc["corruption"].items()})
    blocks = [f"test corruption: {spec.describe()}"]
    for key, title in (("eval", "evaluation"), ("ssl", "pre-trained + fine-tuned"),
                       ("scratch", "from scratch")):
        if key in doc:
            blocks.append(MetricsReport(doc[key]["folds"]).render(title))
    comp = doc.get("comparison")
    if comp:
        blocks.append(
            f"subject accuracy: pre-trained {100 * comp['ssl_subject_accuracy']:.2f}, "
            f"scratch {100 * comp['scratch_subject_accuracy']:.2f}, "
            f"margin {100 * comp['margin']:+.2f} (required {100 * comp['required_margin']:.2f})"
            f" [{comp['flag']}]"
        )
    return "\n\n".join(blocks)


def cmd_report(args):
    path = Path(args.metrics)
    if not path.is_file():
        raise UsageError(f"metrics file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}")
    if "corruption" not in doc:
        raise UsageError(f"{path} is not a metrics file")
    text = render_metrics(doc)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "metrics.txt", text)
    print(text)


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "xval": cmd_xval,
    "corrupt": cmd_corrupt,
}


def run(argv=None):
    """Run one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"remind: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
            return 0
        opts = resolve_options(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](opts, out)
        return 0
    except UsageError as exc:
        print(f"remind: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"remind: runtime error: {exc}", file=sys.stderr)
        return 1
    except (RemindError, FileNotFoundError) as exc:
        print(f"remind: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
