"""Command-line driver: ``gkdlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness.config import ConfigError, load_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. optim.lr=1e-3 (repeatable)")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--seed", type=int)


def _config(args):
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    if getattr(args, "data", None):
        overrides.append(f"data_dir={json.dumps(args.data)}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "method", None):
        overrides.append(f"method={json.dumps(args.method)}")
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> None:
    from .harness.data import generate_synthetic_dataset

    cfg = _config(args)
    spec = cfg.synthetic
    out = args.out or str(Path(cfg.out_dir) / "data")
    generate_synthetic_dataset(spec, cfg.seed, out)
    print(f"wrote dataset to {out}")


def cmd_train_teacher(args) -> None:
    from .harness.train import train_teacher

    cfg = _config(args)
    _, result = train_teacher(cfg)
    print(f"teacher val_acc={result.final_val_acc:.2f} test_acc={result.test_acc:.2f} -> {cfg.out_dir}")


def cmd_distill(args) -> None:
    from .harness.train import distill, load_teacher

    cfg = _config(args)
    teacher, vocab = load_teacher(args.teacher)
    _, result = distill(cfg, teacher, teacher_vocab=vocab)
    ll = result.loyalty
    print(
        f"{cfg.method} val_acc={result.final_val_acc:.2f} test_acc={result.test_acc:.2f} "
        f"LL={ll['label_loyalty']:.1f} PL={ll['probability_loyalty']:.1f} SL={ll['saliency_loyalty']} "
        f"-> {cfg.out_dir}"
    )


def cmd_grid(args) -> None:
    from .harness.grid import GridSpec, grid_search

    cfg = _config(args)
    spec = GridSpec.from_dict(json.loads(Path(args.grid).read_text())) if args.grid else GridSpec()
    res = grid_search(cfg, spec, args.teacher, cfg.out_dir, workers=args.workers)
    print(json.dumps({"stage1_best": _brief(res["stage1_best"]),
                      "stage2_best": {k: _brief(v) for k, v in res["stage2_best"].items()}}, indent=2))


def _brief(row):
    if row is None:
        return None
    return {k: row.get(k) for k in ("method", "alpha", "tau", "beta", "gamma", "val_acc") if k in row}


def cmd_eval_loyalty(args) -> None:
    from .harness.data import load_dataset
    from .harness.train import eval_loyalty, load_teacher

    teacher, tv = load_teacher(args.teacher)
    student, sv = load_teacher(args.student)
    if tv is not None and sv is not None and tv != sv:
        raise ValueError("teacher and student vocabularies differ")
    _, splits = load_dataset(args.data, teacher.config.max_len)
    if args.split not in splits:
        raise ValueError(f"split {args.split!r} not found in {args.data}")
    report = eval_loyalty(teacher, student, splits[args.split], tv, sv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "loyalty.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json(), end="")


def cmd_verify_dropout_bias(args) -> None:
    from . import dropout_bias as db

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = db.verify_theorem(n_trials=args.trials, seed=args.seed or 0)
    lines = ["delta,n_trials,max_abs_discrepancy"] + [
        f"{r['delta']!r},{r['n_trials']},{r['max_abs_discrepancy']!r}" for r in rows
    ]
    (out / "theorem_check.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    worst = max(r["max_abs_discrepancy"] for r in rows)
    print(f"quadratic identity: worst max-abs discrepancy {worst:.3e} over {args.trials} trials per delta")
    if args.model:
        from .harness.data import load_dataset
        from .harness.train import load_teacher

        if not args.data:
            raise ValueError("--model requires --data")
        model, _ = load_teacher(args.model)
        _, splits = load_dataset(args.data, model.config.max_len)
        split = splits[args.split]
        n = min(args.n_items, len(split))
        batch = split.batch(range(n))
        report = db.cosine_similarity_report(model, batch, args.delta, args.n_samples, seed=args.seed or 0)
        (out / "cosine_report.csv").write_text(db.report_csv(report), encoding="utf-8")
        text = db.report_text(report)
        (out / "cosine_report.txt").write_text(text, encoding="utf-8")
        print(text, end="")
    if worst > 1e-10:
        raise RuntimeError(f"quadratic identity violated: {worst:.3e}")


def cmd_saliency_report(args) -> None:
    from .harness.data import read_tsv
    from .harness.report import emit_saliency_report
    from .harness.train import load_teacher

    models = []
    for spec in args.model:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).stem, spec
        model, vocab = load_teacher(path)
        if vocab is None:
            raise ValueError(f"checkpoint {path} carries no vocabulary")
        models.append((name, model, vocab))
    if args.sentences:
        sentences = [ln.split() for ln in Path(args.sentences).read_text(encoding="utf-8").splitlines() if ln.strip()]
    elif args.data:
        sentences = [w for _, w in read_tsv(Path(args.data) / f"{args.split}.tsv")[: args.n]]
    else:
        raise ValueError("provide --sentences or --data")
    out = Path(args.out)
    if out.suffix == "":
        out = out / ("saliency.html" if args.format == "html" else "saliency.txt")
    emit_saliency_report(models, sentences, out, args.format)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gkdlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic classification dataset")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="fine-tune the teacher with CE")
    _common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--method", choices=("finetune", "vanilla_kd", "bert_pkd", "gkd", "gkd_cls"))
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("grid", help="two-stage hyperparameter search")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--grid", help="JSON grid spec (defaults to the standard grid)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval-loyalty", help="LL / PL / SL between two checkpoints")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_loyalty)

    p = sub.add_parser("verify-dropout-bias", help="check the dropout gradient-bias identity")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", help="checkpoint for the cosine-similarity study")
    p.add_argument("--data")
    p.add_argument("--split", default="train")
    p.add_argument("--n-items", type=int, default=200)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.1)
    p.set_defaults(func=cmd_verify_dropout_bias)

    p = sub.add_parser("saliency-report", help="colorized saliency for one or more models")
    p.add_argument("--model", action="append", required=True, metavar="NAME=CKPT")
    p.add_argument("--sentences", help="file with one whitespace-tokenized sentence per line")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("-n", type=int, default=5)
    p.add_argument("--format", default="html")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"gkdlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
