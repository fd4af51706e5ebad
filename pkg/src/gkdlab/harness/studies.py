"""Multi-seed comparisons: vanilla KD vs GKD-CLS, with and without student dropout."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..losses import LossWeights
from .config import ExperimentConfig
from .train import distill, prepare_data, train_teacher

log = logging.getLogger(__name__)

VARIANTS = ("vanilla_kd", "gkd_cls", "gkd_cls_dropout")

# noisy desk task; the teacher stops early since it overfits flipped labels
TREND_OVERRIDES = [
    "synthetic.noise_rate=0.1",
    "synthetic.n_train=2000",
    "synthetic.max_len=16",
    "teacher.max_len=16",
    "student.max_len=16",
    "teacher_optim.epochs=3",
]


@dataclass
class TrendSpec:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    alpha: float = 0.5
    tau: float = 10.0
    beta: float = 10.0
    gamma: float = 0.2


def variant_config(base: ExperimentConfig, variant: str, seed: int, spec: TrendSpec, out: Path):
    w = LossWeights(alpha=spec.alpha, tau=spec.tau)
    kw = {}
    if variant.startswith("gkd_cls"):
        w = replace(w, beta=spec.beta, gamma=spec.gamma)
        kw["dropout_ablation"] = variant.endswith("_dropout")
        method = "gkd_cls"
    else:
        method = variant
    return replace(base, method=method, weights=w, seed=seed, out_dir=str(out / variant / f"seed{seed}"), **kw)


def trend_study(base: ExperimentConfig, spec: TrendSpec, out_dir, teacher=None) -> dict:
    """One teacher; every seed distills each variant from it.

    The seed varies the student's data order and dropout draws (students
    start from the same teacher copy). Rows and per-variant medians are
    written to ``trend.csv`` and ``trend.json``.
    """
    out = Path(out_dir)
    t0 = time.perf_counter()
    if base.data_dir is None:
        _, _, data_dir = prepare_data(replace(base, out_dir=str(out)))
        base = replace(base, data_dir=str(data_dir))
    data = prepare_data(base)
    if teacher is None:
        teacher, tres = train_teacher(replace(base, method="finetune", out_dir=str(out / "teacher")), data)
        log.info("teacher val_acc %.2f", tres.final_val_acc)
    rows = []
    for seed in spec.seeds:
        for variant in VARIANTS:
            cfg = variant_config(base, variant, seed, spec, out)
            _, r = distill(cfg, teacher, data=data)
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "val_acc": r.final_val_acc,
                    "test_acc": r.test_acc,
                    "LL": r.loyalty["label_loyalty"],
                    "PL": r.loyalty["probability_loyalty"],
                    "SL": r.loyalty["saliency_loyalty"],
                    "seconds": round(r.wall_clock_seconds, 1),
                }
            )
            log.info("%s seed %d: val %.2f SL %s", variant, seed, r.final_val_acc, r.loyalty["saliency_loyalty"])
    summary = {
        v: {k: float(np.median([r[k] for r in rows if r["variant"] == v])) for k in ("val_acc", "LL", "PL", "SL")}
        for v in VARIANTS
    }
    result = {"rows": rows, "median": summary, "seconds": time.perf_counter() - t0}
    out.mkdir(parents=True, exist_ok=True)
    (out / "trend.csv").write_text(rows_csv(rows), encoding="utf-8")
    (out / "trend.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()
