"""Command line entry point: ``imcnet <command> ...``."""
import argparse
import sys
from pathlib import Path

import numpy as np

from imcnet.errors import ConfigError, DatasetError, IMCError

EXIT_ERROR = 2


def _parse_sizes(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {text!r}") from None
    if not sizes:
        raise ConfigError("--sizes is empty")
    return sizes


def cmd_train(args):
    from imcnet.config import RunConfig
    from imcnet.train import train

    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.optim.seed = args.seed
    if args.lr_scale is not None:
        cfg.optim.lr_scale = args.lr_scale
    if args.out is not None:
        cfg.output.dir = args.out
    cfg.validate()

    def log(rec):
        if rec["iter"] % args.log_every == 0:
            print(f"iter {rec['iter']:6d} {rec['kind']:5s} loss {rec['total']:.4f} ({rec['seconds']:.2f}s)",
                  flush=True)

    result = train(cfg, log=log)
    print(f"done: {result.iterations} iterations, train J {result.final_j:.4f}, checkpoint {result.checkpoint}")
    return 0


def _input_sequences(path):
    """[(name, sequence, output subdirectory)] for a DAVIS root or a flat frame directory."""
    from imcnet.data.datasets import IMAGE_EXTS, FileSequence, load_video_sequences

    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"input is not a directory: {path}")
    if (path / "JPEGImages").is_dir():
        return [(s.name, s, s.name) for s in load_video_sequences(path, require_masks=False)]
    frames = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)
    if frames:
        return [(path.name, FileSequence(path.name, frames), "")]
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    seqs = []
    for d in subdirs:
        fr = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)
        if fr:
            seqs.append((d.name, FileSequence(d.name, fr), d.name))
    if not seqs:
        raise DatasetError(f"no frames found under {path}")
    return seqs


def cmd_infer(args):
    from PIL import Image
    from threadpoolctl import threadpool_limits

    from imcnet.config import RunConfig
    from imcnet.train import infer_sequence, load_model, thread_count

    if args.tta:
        raise ConfigError("--tta is reserved and not implemented")
    cfg = RunConfig.load(args.config)
    model = load_model(cfg, args.checkpoint)
    out_root = Path(args.out)
    with threadpool_limits(limits=thread_count()):
        for name, seq, sub in _input_sequences(args.input):
            probs = infer_sequence(model, seq, cfg.model.n, cfg.model.dt, cfg.optim.batch_size)
            out_dir = out_root / sub
            out_dir.mkdir(parents=True, exist_ok=True)
            for i, p in enumerate(probs):
                if args.probs:
                    img = np.round(np.clip(p, 0, 1) * 255).astype(np.uint8)
                else:
                    img = np.where(p >= 0.5, 255, 0).astype(np.uint8)
                Image.fromarray(img).save(out_dir / f"{i:05d}.png")
            print(f"{name}: {len(probs)} frames -> {out_dir}")
    return 0


def cmd_eval(args):
    from imcnet.eval import evaluate_dirs, write_reports

    scores, summary = evaluate_dirs(args.pred, args.gt, args.tolerance)
    jsonl, csv_path = write_reports(args.out, scores, summary)
    for s in scores:
        print(f"{s.name:<20s} J {s.j_stats.mean:.4f}  F {s.f_stats.mean:.4f}")
    print(f"{'ALL':<20s} J {summary['J_mean']:.4f}  F {summary['F_mean']:.4f}  J&F {summary['JF_mean']:.4f}")
    print(f"wrote {jsonl} and {csv_path}")
    return 0


def cmd_gradcheck(args):
    from imcnet.tensor.gradcheck import registered_ops, run_registered

    names = None
    if args.op:
        known = registered_ops()
        names = [n.strip() for n in args.op.split(",")]
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigError(f"unknown op {', '.join(unknown)}; known: {', '.join(known)}")
    reports = run_registered(names, seeds=args.seeds)
    for r in reports:
        print(r.line(), flush=True)
    return 0 if all(r.passed for r in reports) else 1


def cmd_bench(args):
    from threadpoolctl import threadpool_limits

    from imcnet.bench import run_bench
    from imcnet.train import thread_count

    with threadpool_limits(limits=thread_count()):
        for r in run_bench(args.kernel, _parse_sizes(args.sizes), args.repeats, args.channels):
            print(r.line(), flush=True)
    return 0


def cmd_synth(args):
    from imcnet.data.synthetic import SynthConfig, generate_synthetic, write_davis

    cfg = SynthConfig.load(args.config) if args.config else SynthConfig()
    seqs = generate_synthetic(cfg)
    root = write_davis(seqs, args.out)
    (Path(root) / "synth.txt").write_text(cfg.dumps())
    print(f"wrote {len(seqs)} sequences to {root}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="imcnet", description="Motion-compensated video object segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr-scale", type=float)
    t.add_argument("--out", help="override the output directory")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks for every frame")
    i.add_argument("--config", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--probs", action="store_true", help="write probabilities (0-255) instead of binary masks")
    i.add_argument("--tta", action="store_true", help=argparse.SUPPRESS)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report path; .jsonl and .csv are written")
    e.add_argument("--tolerance", type=int, help="boundary tolerance in pixels (default: 0.8%% of the diagonal)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--op", help="comma-separated op names (default: all)")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time a kernel")
    b.add_argument("--kernel", required=True)
    b.add_argument("--sizes", required=True, help="comma-separated spatial sizes")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--channels", type=int, default=32)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="write a synthetic dataset in DAVIS layout")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IMCError as exc:
        print(exc.line(), file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"E_IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
