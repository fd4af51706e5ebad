"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) and then asserts the same condition.
The noisy multi-seed study is trained once per module and shared by the
dropout-bias, trend and determinism checks; it takes roughly ten minutes.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import component_loss, make_batch, perturbed
from gkdlab import autodiff as ad
from gkdlab import dropout_bias as db
from gkdlab.harness.config import load_config
from gkdlab.harness.grid import STAGE2_DEFAULTS, GridSpec, grid_search
from gkdlab.harness.studies import TREND_OVERRIDES, TrendSpec, trend_study, variant_config
from gkdlab.harness.train import distill, eval_loyalty, student_objective, teacher_signals, train_teacher
from gkdlab.losses import LossWeights, SkipMap, build_skip_map
from gkdlab.model import DropoutSpec, ModelConfig, TransformerClassifier, init_student_from_teacher

SMALL = {
    "synthetic": {"vocab_size": 40, "n_train": 64, "n_val": 32, "n_test": 32, "max_len": 10, "group_size": 3},
    "teacher": {"vocab_size": 40, "max_len": 10, "d_model": 16, "n_heads": 2, "n_layers": 4, "d_ff": 32},
    "student": {"vocab_size": 40, "max_len": 10, "d_model": 16, "n_heads": 2, "n_layers": 2, "d_ff": 32},
    "optim": {"epochs": 1, "batch_size": 16, "lr": 1e-3},
    "teacher_optim": {"epochs": 2, "batch_size": 16, "lr": 1e-3},
}


def small_cfg(tmp):
    path = Path(tmp) / "cfg.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(SMALL))
    return load_config(path, [f"out_dir={json.dumps(str(tmp))}"])


@pytest.fixture(scope="module")
def trend(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend")
    base = load_config(None, TREND_OVERRIDES + [f"out_dir={json.dumps(str(out))}"])
    t0 = time.perf_counter()
    res = trend_study(base, TrendSpec(), out)
    from gkdlab.harness.train import load_teacher, prepare_data

    base = replace(base, data_dir=str(out / "data"))
    teacher, _ = load_teacher(out / "teacher" / "teacher.npz")
    return {"out": out, "base": base, "res": res, "seconds": time.perf_counter() - t0,
            "teacher": teacher, "data": prepare_data(base)}


def test_quadratic_bias_identity(criterion):
    t0 = time.perf_counter()
    rows = db.verify_theorem(n_trials=100, deltas=(0.0, 0.1, 0.25, 0.5, 0.9), max_dim=10, seed=0)
    dt = time.perf_counter() - t0
    worst = max(r["max_abs_discrepancy"] for r in rows)
    ok = worst <= 1e-10 and dt < 10
    criterion(1, ok, f"worst |exact - closed form| = {worst:.2e} over 500 quadratics, {dt:.1f}s")
    assert ok


def test_every_loss_gradient_matches_finite_differences(criterion):
    rng = np.random.default_rng(2024)
    tcfg = ModelConfig(vocab_size=30, max_len=8, d_model=8, n_heads=2, n_layers=4, d_ff=16, n_classes=2)
    teacher = perturbed(TransformerClassifier.init(tcfg, 0), 1, 0.3)
    student = perturbed(init_student_from_teacher(teacher, 2), 2, 0.1)
    batch = make_batch(rng, batch_size=3, seq=6, n_classes=2)
    used = sorted(set(batch.token_ids[batch.mask.astype(bool)].tolist()))

    # 24 coordinates spread over every parameter kind; embedding rows only where tokens occur
    names = sorted(student.params)
    coords = []
    for i in range(24):
        k = names[i % len(names)]
        shape = student.params[k].shape
        c = tuple(int(rng.integers(0, s)) for s in shape)
        if k == "tok_emb":
            c = (int(rng.choice(used)),) + c[1:]
        if k == "pos_emb":
            c = (int(rng.integers(0, 3)),) + c[1:]
        coords.append((k, c))

    t0 = time.perf_counter()
    worst = {}
    for name in ("ce", "soft_ce", "pkd", "gkd", "gkd_cls"):
        loss = component_loss(name, student, teacher, batch)
        keys = sorted({k for k, _ in coords})
        grads = dict(zip(keys, ad.grad(loss, [student.params[k] for k in keys])))
        an, fd = [], []
        for k, c in coords:
            an.append(grads[k].data[c])
            fd.append(ad.finite_difference_coords(lambda: component_loss(name, student, teacher, batch),
                                                  student.params[k], [c], 1e-5)[0])
        an, fd = np.array(an), np.array(fd)
        worst[name] = float(np.max(np.abs(an - fd)) / np.max(np.abs(fd)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(2, ok, f"relative error on {len(coords)} coordinates: {detail}; {dt:.1f}s")
    assert ok


def test_teacher_copy_has_no_alignment_loss(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = small_cfg(tmp_path)
    teacher, _ = train_teacher(cfg)
    from gkdlab.harness.train import prepare_data

    _, splits, _ = prepare_data(cfg)
    copy = init_student_from_teacher(teacher, teacher.config.n_layers)
    depth = teacher.config.n_layers
    skip = SkipMap(tuple(range(1, depth)), tuple(range(1, depth)))
    batch = splits["train"].batch(range(32))
    sig = teacher_signals(teacher, batch, "gkd_cls", skip)
    w = LossWeights(alpha=0.5, tau=10.0, beta=10.0, gamma=0.2)
    _, v = student_objective("gkd_cls", copy, batch, w, sig, skip, DropoutSpec())
    rep = eval_loyalty(teacher, teacher, splits["test"])
    dt = time.perf_counter() - t0
    scores = (rep.label_loyalty, rep.probability_loyalty, rep.saliency_loyalty)
    ok = (v["soft"] == 0.0 and max(v["gkd"], v["pkd"], v["gkd_cls"]) < 1e-8
          and scores == (100.0, 100.0, 100.0) and dt < 60)
    criterion(3, ok, f"soft {v['soft']:.1e} gkd {v['gkd']:.1e} pkd {v['pkd']:.1e} gkd_cls {v['gkd_cls']:.1e}; "
                     f"LL/PL/SL {scores}; {dt:.1f}s")
    assert ok


def test_skip_map_six_to_twelve(criterion):
    m = build_skip_map(6, 12)
    ok = m.student_layers == (1, 2, 3, 4, 5) and m.teacher_layers == (2, 4, 6, 8, 10)
    criterion(4, ok, f"student {m.student_layers} -> teacher {m.teacher_layers}")
    assert ok


def test_grid_run_count_and_hyperparameters(criterion, tmp_path):
    cfg = small_cfg(tmp_path / "teacher")
    train_teacher(cfg)
    spec = GridSpec()
    res = grid_search(cfg, spec, tmp_path / "teacher" / "teacher.npz", tmp_path / "grid")
    snaps = [json.loads(p.read_text()) for p in sorted((tmp_path / "grid").rglob("config.snapshot"))]
    s1 = [s for s in snaps if s["method"] == "vanilla_kd"]
    s2 = [s for s in snaps if s["method"] != "vanilla_kd"]
    pairs = sorted((s["weights"]["alpha"], s["weights"]["tau"]) for s in s1)
    want = sorted((a, t) for a in spec.alpha for t in spec.tau)
    best = res["stage1_best"]
    n2 = {m: len(STAGE2_DEFAULTS[m].get("beta", [])) * len(STAGE2_DEFAULTS[m].get("gamma", [None]))
          for m in spec.methods}
    got2 = {m: [s for s in s2 if s["method"] == m] for m in spec.methods}
    fixed = all(s["weights"]["alpha"] == best["alpha"] and s["weights"]["tau"] == best["tau"] for s in s2)
    cls_pts = sorted((s["weights"]["beta"], s["weights"]["gamma"]) for s in got2["gkd_cls"])
    ok = (
        len(res["runs"]) == len(snaps) == 9 + sum(n2.values())
        and len(s1) == 9
        and pairs == want
        and all(len(got2[m]) == n2[m] for m in spec.methods)
        and fixed
        and sorted(s["weights"]["beta"] for s in got2["bert_pkd"]) == [10, 100, 500, 1000]
        and sorted(s["weights"]["beta"] for s in got2["gkd"]) == [0.05, 0.1, 0.2, 0.4]
        and cls_pts == [(500, g) for g in (0.02, 0.05, 0.1, 0.2)]
        and all(r["ok"] for r in res["runs"])
    )
    criterion(8, ok, f"{len(s1)} stage-1 + {len(s2)} stage-2 runs {dict((m, len(v)) for m, v in got2.items())}; "
                     f"stage-2 fixed at alpha={best['alpha']} tau={best['tau']}")
    assert ok


def test_trend_gkd_cls_beats_vanilla_on_saliency(criterion, trend):
    med = trend["res"]["median"]
    g, v = med["gkd_cls"], med["vanilla_kd"]
    dt = trend["seconds"]
    ok = g["SL"] > v["SL"] and g["val_acc"] >= v["val_acc"] - 0.5 and dt < 1800
    criterion(6, ok, f"median SL gkd_cls {g['SL']:.2f} vs vanilla {v['SL']:.2f}; "
                     f"median val acc {g['val_acc']:.2f} vs {v['val_acc']:.2f}; {dt:.0f}s for 5 seeds")
    assert ok


def test_trend_student_dropout_does_not_help(criterion, trend):
    med = trend["res"]["median"]
    with_d, without = med["gkd_cls_dropout"]["val_acc"], med["gkd_cls"]["val_acc"]
    raw = {v: [r["val_acc"] for r in trend["res"]["rows"] if r["variant"] == v]
           for v in ("gkd_cls", "gkd_cls_dropout")}
    ok = with_d <= without
    criterion(7, ok, f"median val acc with dropout {with_d:.2f} vs without {without:.2f}; "
                     f"raw with {raw['gkd_cls_dropout']} without {raw['gkd_cls']}")
    assert ok


def test_dropout_bias_grows_with_depth(criterion, trend):
    from gkdlab.harness.train import load_teacher

    student, _ = load_teacher(trend["out"] / "gkd_cls" / "seed0" / "student.npz")
    batch = trend["data"][1]["train"].batch(range(200))
    t0 = time.perf_counter()
    rows = db.cosine_similarity_report(student, batch, 0.1, 1000, seed=0)
    dt = time.perf_counter() - t0
    cos = {r["target"]: r["mean_cosine"] for r in rows}
    deepest = f"cls_at_layer_{max(build_skip_map(student.config.n_layers, 2 * student.config.n_layers).student_layers)}"
    ok = all(c < 1 for c in cos.values()) and cos["input_embeddings"] <= cos[deepest] and dt < 900
    detail = ", ".join(f"{k} {c:.4f}" for k, c in cos.items())
    criterion(5, ok, f"mean cosine over 200 examples: {detail}; {dt:.0f}s")
    assert ok


def test_same_seed_reproduces_metrics_files(criterion, trend, tmp_path):
    same = []
    for variant in ("vanilla_kd", "gkd_cls"):
        cfg = variant_config(trend["base"], variant, 0, TrendSpec(), tmp_path)
        distill(cfg, trend["teacher"], data=trend["data"])
        a, b = trend["out"] / variant / "seed0", tmp_path / variant / "seed0"
        for name in ("metrics.csv", "loyalty.json"):
            same.append((a / name).read_bytes() == (b / name).read_bytes())
        ra, rb = json.loads((a / "result.json").read_text()), json.loads((b / "result.json").read_text())
        ra.pop("wall_clock_seconds"), rb.pop("wall_clock_seconds")
        same.append(ra == rb)
    ok = all(same)
    criterion(9, ok, f"{sum(same)}/{len(same)} files identical across reruns (result.json without wall clock)")
    assert ok
