"""``hvqa`` command line: gen, train, eval, bench, viz.

Configuration overrides are passed as ``--section.key=value`` (or
``--section.key value``) after the subcommand and are applied after the
``--config`` file. Exit codes: 0 ok, 2 configuration error, 3 I/O or
file-format error, 4 runtime error. ``HVQA_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench as B
from .config import RunConfig, preset
from .data import FAMILIES, answer_histogram, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError
from .training import evaluate, load_checkpoint, read_metrics, train
from .viz import read_ppm, render_samples

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4


class SelfCheckError(RuntimeError):
    """A file written by a subcommand did not read back as written."""


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvqa", description="Hard-attention question answering on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--config")
    t.add_argument("--preset", choices=("desk", "clevr"), default="desk")
    t.add_argument("--out", required=True)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="per-family accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the table as JSON")

    b = sub.add_parser("bench", help="time selection + aggregation against k")
    b.add_argument("--k", type=_ints, default=[8, 16, 32, 64])
    b.add_argument("--n", type=int, default=64)
    b.add_argument("--d", type=int, default=512)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--aggregators", default="sum,pairwise,rn")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    v = sub.add_parser("viz", help="darken unattended cells of dataset images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--indices", type=_ints, required=True)
    v.add_argument("--out", required=True)
    return p


def parse_overrides(extra: list[str]) -> dict:
    """Turn leftover ``--a.b=v`` / ``--a.b v`` arguments into an ordered dict."""
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {body!r}")
            key, value = body, extra[i + 1]
            i += 1
        if key not in RunConfig.keys():
            raise ConfigError(f"unknown key {key!r}")
        out[key] = value
        i += 1
    return out


def load_config(args, overrides: dict) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text(), base=cfg)
    cfg = cfg.with_overrides(overrides)
    if args.max_steps is not None:
        cfg = cfg.with_overrides({"train.max_steps": args.max_steps})
    if args.seed is not None:
        cfg = cfg.with_overrides({"train.seed": args.seed})
    return cfg


def cmd_gen(args, out=None) -> int:
    out = out or sys.stdout
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    ds = generate_dataset(args.n, args.seed, args.canvas)
    path = Path(args.out)
    write_dataset(ds, path)
    if not read_dataset(path).equals(ds):
        raise SelfCheckError(f"{path} did not read back identically")
    hist = answer_histogram(ds)
    lines = [f"samples: {len(ds)}", f"seed: {args.seed}", "", "family counts:"]
    for i, fam in enumerate(FAMILIES):
        lines.append(f"  {fam}: {int((ds.families == i).sum())}")
    lines += ["", "answer counts by family:"]
    for fam, counts in hist.items():
        lines.append(f"  {fam}: " + ", ".join(f"{a}={c}" for a, c in counts.items()))
    summary = path.with_name(path.name + ".summary.txt")
    summary.write_text("\n".join(lines) + "\n")
    if summary.read_text() != "\n".join(lines) + "\n":
        raise SelfCheckError(f"{summary} did not read back identically")
    print(f"wrote {len(ds)} samples to {path} (summary: {summary})", file=out)
    return EXIT_OK


def cmd_train(args, overrides, out=None) -> int:
    out = out or sys.stdout
    cfg = load_config(args, overrides)
    data = read_dataset(args.data)
    eval_data = read_dataset(args.eval_data) if args.eval_data else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())

    def log(row):
        print(
            f"step {row['step']}: loss {row['loss']:.4f} train_acc {row['train_acc']:.4f} "
            f"eval_acc {row['eval_acc']:.4f} selected {row['mean_selected_fraction']:.4f}",
            file=out, flush=True,
        )

    res = train(cfg, data, eval_data, out_dir=out_dir, resume=args.resume, log=log)
    ckpt = load_checkpoint(out_dir / "checkpoint.hckp")
    if ckpt.step != res.step or ckpt.config.hash() != cfg.hash():
        raise SelfCheckError("checkpoint did not read back as written")
    rows = read_metrics(out_dir / "metrics.csv")
    if (rows[-1]["step"] if rows else 0) != res.step:
        raise SelfCheckError("metrics CSV does not end at the final step")
    if cfg.attention.mode == "adahan":
        for epoch, frac in res.epoch_fractions:
            print(f"epoch {epoch}: mean selected fraction {frac:.4f}", file=out)
    print(f"stopped after {res.step} steps ({res.stopped}); outputs in {out_dir}", file=out)
    return EXIT_OK


def format_accuracy(table: dict) -> str:
    lines = [f"{'family':<16} {'n':>6} {'accuracy':>9}"]
    for fam in FAMILIES:
        lines.append(f"{fam:<16} {table['n_' + fam]:>6} {table[fam]:>9.4f}")
    lines.append(f"{'overall':<16} {table['n']:>6} {table['overall']:>9.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args, out=None) -> int:
    out = out or sys.stdout
    table = evaluate(load_checkpoint(args.checkpoint), read_dataset(args.data))
    out.write(format_accuracy(table))
    if args.out:
        path = Path(args.out)
        path.write_text(json.dumps(table, indent=2, sort_keys=True))
        if json.loads(path.read_text()) != json.loads(json.dumps(table)):
            raise SelfCheckError(f"{path} did not read back identically")
    return EXIT_OK


def cmd_bench(args, out=None) -> int:
    out = out or sys.stdout
    aggs = [a for a in args.aggregators.split(",") if a]
    if any(k > args.n or k < 1 for k in args.k):
        raise ConfigError(f"every --k entry must lie in [1, {args.n}]")
    rows = B.run_bench(args.k, args.n, args.d, args.heads, args.reps, args.warmup, aggs, args.seed)
    csv_path, _ = B.save_report(rows, args.out)
    if B.read_csv(csv_path) != rows:
        raise SelfCheckError(f"{csv_path} did not read back identically")
    out.write(B.format_table(rows))
    return EXIT_OK


def cmd_viz(args, out=None) -> int:
    out = out or sys.stdout
    ckpt = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    if list(ckpt.question_vocab) != list(data.question_vocab) or list(ckpt.answer_vocab) != list(data.answer_vocab):
        raise ConfigError("checkpoint vocabularies do not match the dataset")
    paths = render_samples(ckpt.build_model(), data, args.indices, args.out)
    for p in paths:
        H, W = data.image_shape[:2]
        if read_ppm(p).shape != (H, W, 3):
            raise SelfCheckError(f"{p} did not read back with the expected size")
        print(f"wrote {p}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra and args.command != "train":
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        threads = os.environ.get("HVQA_THREADS", "").strip()
        if threads and not (threads.isdigit() and int(threads) > 0):
            raise ConfigError(f"HVQA_THREADS must be a positive integer, got {threads!r}")
        limit = int(threads) if threads else None
        with threadpool_limits(limit):
            if args.command == "gen":
                return cmd_gen(args)
            if args.command == "train":
                return cmd_train(args, parse_overrides(extra))
            if args.command == "eval":
                return cmd_eval(args)
            if args.command == "bench":
                return cmd_bench(args)
            return cmd_viz(args)
    except ConfigError as e:
        print(f"hvqa: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"hvqa: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"hvqa: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
