"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``eval``, ``inspect-attention``,
``export-ratios``. Failures print one line ``tokenvos: error[<category>]: ...``
to stderr and exit with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, MemoryPolicy, RunConfig, load_config, model_digest
from .manifest import RunManifest

log = logging.getLogger("tokenvos")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DIVERGED = 5
EXIT_DIGEST = 6

LOG_ENV = "TOKENVOS_LOG"


class CLIError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


class DigestMismatch(CLIError):
    def __init__(self, message: str):
        super().__init__("digest", EXIT_DIGEST, message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", EXIT_USAGE, f"{self.prog}: {message}")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise CLIError("io", EXIT_IO, f"config file not found: {path}")
    return load_config(path)


def _policy(args, base: MemoryPolicy) -> MemoryPolicy:
    return MemoryPolicy(
        kind=args.policy or base.kind,
        store_interval=args.store_interval or base.store_interval,
        cap=args.cap or base.cap,
        topk=args.topk if args.topk is not None else base.topk,
    )


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .io import write_sequence
    from .synth import gen_dataset, with_frames

    cfg = _read_config(args.config)
    synth = with_frames(cfg.synth, args.frames) if args.frames else cfg.synth
    seed = cfg.synth.seed if args.seed is None else args.seed
    out = Path(args.out_dir)
    man = RunManifest("gen", cfg.to_dict(), model_digest(cfg.model), seed, argv=list(args.argv))
    names = []
    for i, (frames, rasters) in enumerate(gen_dataset(synth, args.count, seed)):
        name = f"seq{i:03d}"
        write_sequence(out, name, frames, rasters)
        names.append(name)
    man.outputs = {"dataset": str(out), "sequences": names}
    man.finish()
    man.write(out / "manifest.json")
    print(f"wrote {len(names)} sequences of {synth.frames} frames to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .io import save_model
    from .pipeline import Trainer
    from .plotting import plot_ratios, plot_training

    cfg = _read_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.precision is not None:
        cfg.train.precision = args.precision
    cfg.train.validate()
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else ckpt.with_suffix(".metrics.csv")
    man = RunManifest("train", cfg.to_dict(), model_digest(cfg.model), cfg.train.seed, argv=list(args.argv))
    trainer = Trainer(cfg)
    trainer.fit(metrics_path=metrics_path)
    ratios = trainer.ratios()
    save_model(ckpt, trainer.model, cfg, meta={
        "steps": trainer.step,
        "ratios": [float(r) for r in ratios],
        "ratio_window": trainer.tracker.window,
    })
    rows = np.asarray(trainer.log_rows, dtype=np.float64)
    fig_loss = ckpt.with_suffix(".loss.png")
    plot_training(rows[:, 0], rows[:, 1], fig_loss, rows[:, 2], rows[:, 3])
    outputs = {"checkpoint": str(ckpt), "metrics": str(metrics_path), "loss_figure": str(fig_loss)}
    if cfg.model.dts:
        fig_r = ckpt.with_suffix(".ratios.png")
        plot_ratios(ratios, fig_r, history=rows[:, 6:])
        outputs["ratio_figure"] = str(fig_r)
    man.outputs = outputs
    man.extra = {"final_loss": float(rows[-1, 1]), "ratios": [float(r) for r in ratios]}
    man.finish()
    man.write(ckpt.with_suffix(".manifest.json"))
    print(f"trained {trainer.step} steps, final loss {rows[-1, 1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / inspect-attention / export-ratios
# --------------------------------------------------------------------------

def _load_checked(args):
    """Load a checkpoint; refuse digest mismatches unless ``--force``."""
    from .io import load_model

    model, cfg, header = load_model(args.ckpt, dtype=np.float64 if args.precision == "float64" else None)
    stored = header.get("config_digest")
    problems = []
    if stored != model_digest(cfg.model):
        problems.append(f"checkpoint digest {stored} does not match its embedded config")
    if getattr(args, "config", None):
        want = model_digest(_read_config(args.config).model)
        if want != stored:
            problems.append(f"config {args.config} has model digest {want}, checkpoint has {stored}")
    if problems:
        if not args.force:
            raise DigestMismatch("; ".join(problems) + " (use --force to override)")
        log.warning("ignoring digest mismatch: %s", "; ".join(problems))
    ratios = np.asarray(header.get("meta", {}).get("ratios", np.ones(cfg.model.L)))
    return model, cfg, header, ratios


def _videos(args):
    from .io import read_mask, read_sequence, sequence_dirs

    seqs = sequence_dirs(args.video_dir)
    if args.first_mask and len(seqs) != 1:
        raise CLIError("usage", EXIT_USAGE, "--first-mask needs --video-dir to point at a single video")
    for seq in seqs:
        frames, masks = read_sequence(seq)
        if args.first_mask:
            first = read_mask(args.first_mask)
        elif masks is not None:
            first = masks[0]
        else:
            raise CLIError("io", EXIT_IO, f"{seq}: no masks/ directory and no --first-mask given")
        yield seq.name, frames, first, masks


def cmd_eval(args) -> int:
    from .autodiff import precision
    from .io import write_masks
    from .memory import dump_memory_csv
    from .metrics import EvalReport, score_sequence
    from .pipeline import InferenceSession, infer_video
    from .plotting import plot_scores

    model, cfg, header, ratios = _load_checked(args)
    policy = _policy(args, cfg.memory)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("eval", cfg.to_dict(), header["config_digest"], cfg.train.seed, argv=list(args.argv))
    report = EvalReport()
    outputs = {"predictions": str(out / "pred")}
    dumps = []
    with precision(np.dtype(model.dtype).name):
        for name, frames, first, masks in _videos(args):
            sess = InferenceSession(model, policy, ratios)
            preds = np.stack(list(infer_video(model, frames, first, session=sess)))
            write_masks(out / "pred" / name, preds)
            if args.memory_dump:
                dump = Path(args.memory_dump)
                if not dump.is_absolute():
                    dump = out / dump
                path = dump.with_name(f"{dump.stem}_{name}{dump.suffix or '.csv'}")
                dump_memory_csv(sess.memories, path)
                dumps.append(str(path))
            if masks is not None and len(masks) == len(preds):
                for k, (J, F) in score_sequence(preds, masks, int(first.max())).items():
                    report.add(name, k, J, F)
    if dumps:
        outputs["memory_dumps"] = dumps
    if report.per_object:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sequence", "object", "J", "F", "JF"])
            w.writeheader()
            for r in report.per_object:
                w.writerow({**r, "JF": (r["J"] + r["F"]) / 2})
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in report.summary().items():
                w.writerow([k, f"{v:.6f}"])
        names = sorted({r["sequence"] for r in report.per_object})
        jf = [np.mean([(r["J"] + r["F"]) / 2 for r in report.per_object if r["sequence"] == n]) for n in names]
        plot_scores(names, jf, out / "scores.png")
        outputs.update(metrics=str(out / "metrics.csv"), summary=str(out / "summary.csv"),
                       figure=str(out / "scores.png"))
        man.extra = report.summary()
        s = report.summary()
        print(f"J={s['J_mean']:.4f} F={s['F_mean']:.4f} J&F={s['J&F']:.4f}")
    else:
        print(f"wrote predictions to {out / 'pred'} (no ground truth to score)")
    man.outputs = outputs
    man.finish()
    man.write(out / "manifest.json")
    return EXIT_OK


def attention_rows(model, videos, policy, ratios) -> list:
    """Per-layer attention aggregates of current-frame queries over all predicted frames."""
    from .autodiff import precision
    from .pipeline import InferenceSession

    L = model.cfg.L
    acc = [{"w_mem": [], "w_ref": [], "w_self": []} for _ in range(L)]
    with precision(np.dtype(model.dtype).name):
        for frames, first in videos:
            sess = InferenceSession(model, policy, ratios)
            sess.start(frames[0], first)
            for f in frames[1:]:
                sess.step(f)
                for l, lo in enumerate(sess.last_output.layers):
                    d = lo.stats.decomp
                    acc[l]["w_mem"].append(np.ravel(d.w_mem))
                    acc[l]["w_ref"].append(np.ravel(d.w_ref))
                    acc[l]["w_self"].append(np.ravel(d.w_self))
    from .attention import AttentionDecomposition

    rows = []
    for l in range(L):
        if not acc[l]["w_mem"]:
            raise CLIError("io", EXIT_IO, "videos need at least two frames to inspect attention")
        d = AttentionDecomposition(*(np.concatenate(acc[l][k]) for k in ("w_mem", "w_ref", "w_self")))
        rows.append({"layer": l, **d.aggregates()})
    return rows


def cmd_inspect_attention(args) -> int:
    from .plotting import plot_attention_blocks

    model, cfg, header, ratios = _load_checked(args)
    policy = _policy(args, cfg.memory)
    vids = [(frames, first) for _, frames, first, _ in _videos(args)]
    rows = attention_rows(model, vids, policy, ratios)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["layer", "w_mem_mean", "w_ref_mean", "w_self_mean", "argmax_block_fraction"]
    with open(out / "attention.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "layer" else f"{r[k]:.6f}") for k in fields})
    plot_attention_blocks(rows, out / "attention.png")
    man = RunManifest("inspect-attention", cfg.to_dict(), header["config_digest"], cfg.train.seed,
                      argv=list(args.argv),
                      outputs={"csv": str(out / "attention.csv"), "figure": str(out / "attention.png")})
    man.finish()
    man.write(out / "manifest.json")
    print(f"wrote {out / 'attention.csv'}")
    return EXIT_OK


def cmd_export_ratios(args) -> int:
    from .memory import capacity
    from .plotting import plot_ratios

    model, cfg, header, ratios = _load_checked(args)
    cap = args.cap or cfg.memory.cap
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    history = None
    if args.metrics:
        if not Path(args.metrics).is_file():
            raise CLIError("io", EXIT_IO, f"metrics file not found: {args.metrics}")
        with open(args.metrics, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = [f"r_{l}" for l in range(cfg.model.L)]
        history = np.array([[float(r[c]) for c in cols] for r in rows]) if rows else None
    with open(out / "ratios.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "ratio", "capacity"])
        for l, r in enumerate(ratios):
            w.writerow([l, f"{float(r):.6f}", capacity(float(r), cfg.model.N, cap)])
    plot_ratios(ratios, out / "ratios.png", history=history)
    man = RunManifest("export-ratios", cfg.to_dict(), header["config_digest"], cfg.train.seed,
                      argv=list(args.argv),
                      outputs={"csv": str(out / "ratios.csv"), "figure": str(out / "ratios.png")})
    man.finish()
    man.write(out / "manifest.json")
    print(f"wrote {out / 'ratios.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _memory_flags(p) -> None:
    p.add_argument("--policy", "--memory-policy", dest="policy", choices=["fifo", "topk"],
                   help="memory maintenance policy (default from the checkpoint config)")
    p.add_argument("--store-interval", type=int, help="store reference tokens every N frames")
    p.add_argument("--cap", type=int, help="memory capacity multiplier")
    p.add_argument("--topk", type=int, help="tokens kept by the top-k policy when full")


def _checkpoint_flags(p) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--config", help="config whose model section must match the checkpoint")
    p.add_argument("--force", action="store_true", help="run even if config digests differ")
    p.add_argument("--precision", choices=["float32", "float64"], help="inference precision")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenvos", description="Video object segmentation with layer-wise token memory.")
    parser.add_argument("--version", action="version", version=f"tokenvos {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic moving-shapes videos")
    p.add_argument("--config", help="INI config ([synth] section is used)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--frames", type=int, help="frames per sequence (default: synth.frames)")
    p.add_argument("--seed", type=int, help="dataset seed (default: synth.seed)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on synthetic sequences")
    p.add_argument("--config", help="INI config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="segment videos and score them against ground truth")
    _checkpoint_flags(p)
    p.add_argument("--video-dir", required=True, help="one video (with frames/) or a dataset root")
    p.add_argument("--first-mask", help="first-frame mask PNG (default: masks/ of the video)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--memory-dump", help="CSV of final memory provenance per video")
    _memory_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention", help="per-layer attention mass by key block (CSV + PNG)")
    _checkpoint_flags(p)
    p.add_argument("--video-dir", required=True)
    p.add_argument("--first-mask")
    p.add_argument("--out-dir", required=True)
    _memory_flags(p)
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("export-ratios", help="per-layer selection ratios and capacities (CSV + PNG)")
    _checkpoint_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metrics", help="training metrics CSV for the ratio history plot")
    p.add_argument("--cap", type=int)
    p.set_defaults(func=cmd_export_ratios)
    return parser


def main(argv=None) -> int:
    from .autodiff import CheckpointError
    from .embedding import ObjectCountError
    from .io import DataIOError
    from .pipeline import SessionError, TrainingDiverged

    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        args.argv = argv
        return args.func(args)
    except CLIError as exc:
        err = exc
    except TrainingDiverged as exc:
        err = CLIError("divergence", EXIT_DIVERGED, str(exc))
    except (ConfigError, ObjectCountError) as exc:
        err = CLIError("config", EXIT_CONFIG, str(exc))
    except (DataIOError, CheckpointError, OSError) as exc:
        err = CLIError("io", EXIT_IO, str(exc))
    except SessionError as exc:
        err = CLIError("config", EXIT_CONFIG, str(exc))
    print(f"tokenvos: error[{err.category}]: {' '.join(str(err).split())}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
