"""Two-stage hyperparameter search.

Stage 1 tunes (alpha, tau) for vanilla KD. Stage 2 freezes the winners and
sweeps the method's extra weight: beta for bert_pkd and gkd, gamma (with
beta fixed at 500) for gkd_cls.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..losses import LossWeights
from .config import ExperimentConfig
from .train import distill, load_teacher, prepare_data

log = logging.getLogger(__name__)

STAGE2_DEFAULTS = {
    "bert_pkd": {"beta": [10, 100, 500, 1000]},
    "gkd": {"beta": [0.05, 0.1, 0.2, 0.4]},
    "gkd_cls": {"gamma": [0.02, 0.05, 0.1, 0.2], "beta": [500]},
}


@dataclass
class GridSpec:
    alpha: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.7])
    tau: list[float] = field(default_factory=lambda: [5, 10, 20])
    methods: list[str] = field(default_factory=lambda: ["bert_pkd", "gkd", "gkd_cls"])
    stage2: dict[str, dict[str, list[float]]] = field(default_factory=lambda: json.loads(json.dumps(STAGE2_DEFAULTS)))

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        spec = cls(**{k: v for k, v in d.items() if k != "stage2"})
        if "stage2" in d:
            spec.stage2.update(d["stage2"])
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.alpha or not self.tau:
            raise ValueError("grid spec needs at least one alpha and one tau")
        for m in self.methods:
            if m not in STAGE2_DEFAULTS:
                raise ValueError(f"no stage-2 search defined for method {m!r}")
            if not all(self.stage2[m].values()):
                raise ValueError(f"empty stage-2 grid for {m}")


def stage2_points(method: str, spec: GridSpec) -> list[dict]:
    grid = spec.stage2[method]
    if method == "gkd_cls":
        return [{"beta": b, "gamma": g} for b in grid["beta"] for g in grid["gamma"]]
    return [{"beta": b} for b in grid["beta"]]


def _run_one(cfg_dict: dict, teacher_path: str) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        teacher, tvocab = load_teacher(teacher_path)
        _, result = distill(cfg, teacher, teacher_vocab=tvocab)
        return {"ok": True, "val_acc": result.final_val_acc, "test_acc": result.test_acc,
                "config_hash": result.config_hash, "loyalty": result.loyalty}
    except Exception as exc:  # recorded per run, the grid keeps going
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}


def _best(rows: list[dict], keys: tuple[str, ...]) -> dict | None:
    ok = [r for r in rows if r["ok"]]
    if not ok:
        return None
    top = max(r["val_acc"] for r in ok)
    return min((r for r in ok if r["val_acc"] == top), key=lambda r: tuple(r[k] for k in keys))


def _execute(jobs: list[tuple[dict, dict]], teacher_path: str, workers: int) -> list[dict]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_one, [j[0] for j in jobs], [teacher_path] * len(jobs)))
    else:
        outs = [_run_one(j[0], teacher_path) for j in jobs]
    rows = []
    for (cfg_dict, meta), res in zip(jobs, outs):
        rows.append({**meta, "out_dir": cfg_dict["out_dir"], **res})
    return rows


def grid_search(base: ExperimentConfig, spec: GridSpec, teacher_path, out_dir, workers: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base.data_dir is None:
        _, _, data_dir = prepare_data(replace(base, out_dir=str(out)))
        base = replace(base, data_dir=str(data_dir))

    jobs = []
    for a in spec.alpha:
        for t in spec.tau:
            cfg = replace(
                base,
                method="vanilla_kd",
                weights=LossWeights(alpha=a, tau=t),
                out_dir=str(out / "stage1" / f"alpha{a}_tau{t}"),
            )
            cfg.validate()
            jobs.append((cfg.to_dict(), {"stage": 1, "method": "vanilla_kd", "alpha": a, "tau": t}))
    rows = _execute(jobs, str(teacher_path), workers)
    best1 = _best(rows, ("alpha", "tau"))
    result = {"stage1_best": best1, "stage2_best": {}}
    if best1 is None:
        log.error("every stage-1 run failed")
    else:
        a, t = best1["alpha"], best1["tau"]
        jobs = []
        for method in spec.methods:
            for point in stage2_points(method, spec):
                tag = "_".join(f"{k}{v}" for k, v in sorted(point.items()))
                cfg = replace(
                    base,
                    method=method,
                    weights=LossWeights(alpha=a, tau=t, **point),
                    out_dir=str(out / "stage2" / method / tag),
                )
                cfg.validate()
                jobs.append((cfg.to_dict(), {"stage": 2, "method": method, "alpha": a, "tau": t, **point}))
        stage2 = _execute(jobs, str(teacher_path), workers)
        rows += stage2
        for method in spec.methods:
            keys = ("beta", "gamma") if method == "gkd_cls" else ("beta",)
            result["stage2_best"][method] = _best([r for r in stage2 if r["method"] == method], keys)
    result["runs"] = rows
    (out / "grid.json").write_text(json.dumps(_strip(result), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "grid.csv").write_text(grid_csv(rows), encoding="utf-8")
    return result


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k != "trace"}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


GRID_COLUMNS = ("stage", "method", "alpha", "tau", "beta", "gamma", "ok", "val_acc", "test_acc", "error")


def grid_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in GRID_COLUMNS])
    return buf.getvalue()
