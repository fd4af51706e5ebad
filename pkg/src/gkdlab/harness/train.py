"""Teacher fine-tuning, student distillation and loyalty evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..losses import (
    SkipMap,
    build_skip_map,
    combined_gkd,
    combined_gkd_cls,
    cross_entropy,
    gkd_cls_loss,
    gkd_loss,
    pkd_loss,
    soft_ce,
)
from ..metrics import LoyaltyReport, grad_saliency, loyalty_report
from ..model import (
    DropoutSpec,
    TransformerClassifier,
    check_widths,
    forward,
    freeze_embeddings,
    init_student_from_teacher,
    load_checkpoint,
    save_checkpoint,
)
from .config import GRADIENT_METHODS, ConfigError, ExperimentConfig, OptimConfig
from .data import EncodedSplit, Vocab, generate_synthetic_dataset, load_dataset
from .report import emit_saliency_report

log = logging.getLogger(__name__)

COMPONENTS = ("ce", "soft", "pkd", "gkd", "gkd_cls")
EVAL_BATCH = 256
SALIENCY_SAMPLE = 5


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)
            p.data = p.data - update


@dataclass
class RunResult:
    epochs: list[dict]
    test_acc: float
    config_hash: str
    step0: dict
    step_losses: list[float]
    dropout_draws: int
    loyalty: dict | None = None
    wall_clock_seconds: float = 0.0

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1]["val_acc"] if self.epochs else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _derive_seeds(seed: int) -> tuple[int, int, int]:
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return int(a), int(b), int(c)


# ---------------------------------------------------------------------------
# objective assembly
# ---------------------------------------------------------------------------


@dataclass
class TeacherSignals:
    logits: np.ndarray
    cls: list[np.ndarray] = field(default_factory=list)
    emb_grad: np.ndarray | None = None
    cls_grads: list[np.ndarray] = field(default_factory=list)


def teacher_signals(teacher, batch, method: str, skip: SkipMap | None) -> TeacherSignals:
    """Everything the student objective needs from the (dropout-off) teacher."""
    layers = list(skip.teacher_layers) if skip is not None else []
    if method not in GRADIENT_METHODS:
        with ad.no_grad():
            out = forward(teacher, batch)
        return TeacherSignals(out.logits.data, [out.hidden_states[k - 1].data[:, 0] for k in layers])
    out = forward(teacher, batch)
    nodes = [out.input_embeddings] + [out.hidden_states[k - 1] for k in layers]
    grads = ad.grad(ad.sum_(out.max_prob), nodes)
    return TeacherSignals(
        logits=out.logits.data,
        cls=[out.hidden_states[k - 1].data[:, 0] for k in layers],
        emb_grad=grads[0].data,
        cls_grads=[g.data[:, 0] for g in grads[1:]],
    )


def student_objective(
    method: str,
    student: TransformerClassifier,
    batch,
    weights,
    teacher: TeacherSignals | None,
    skip: SkipMap | None,
    dropout: DropoutSpec,
) -> tuple[ad.Tensor, dict[str, float]]:
    """Total training loss for ``method`` plus the float value of each component."""
    out = forward(student, batch, dropout)
    ce = cross_entropy(out.probs, batch.labels)
    zero = ad.Tensor(0.0)
    comps = {"ce": ce, "soft": zero, "pkd": zero, "gkd": zero, "gkd_cls": zero}
    if method == "finetune":
        total = ce
    else:
        comps["soft"] = soft_ce(teacher.logits, out.logits, weights.tau)
        s_layers = list(skip.student_layers) if skip is not None else []
        if method in ("bert_pkd", "gkd_cls"):
            s_cls = [ad.index_select(out.hidden_states[k - 1], 0, axis=1) for k in s_layers]
            comps["pkd"] = pkd_loss(s_cls, teacher.cls, skip)
        if method in GRADIENT_METHODS:
            nodes = [out.input_embeddings] + [out.hidden_states[k - 1] for k in s_layers]
            grads = ad.grad(ad.sum_(out.max_prob), nodes, create_graph=True)
            comps["gkd"] = gkd_loss(grads[0], teacher.emb_grad, batch.lengths)
            if method == "gkd_cls":
                s_g = [ad.index_select(g, 0, axis=1) for g in grads[1:]]
                comps["gkd_cls"] = gkd_cls_loss(s_g, teacher.cls_grads, skip)
        if method == "vanilla_kd":
            total = (1.0 - weights.alpha) * ce + weights.alpha * comps["soft"]
        elif method == "gkd":
            total = combined_gkd(ce, comps["soft"], comps["gkd"], weights)
        else:
            w = weights if method == "gkd_cls" else replace(weights, gamma=0.0)
            total = combined_gkd_cls(ce, comps["soft"], comps["pkd"], comps["gkd"], comps["gkd_cls"], w)
    values = {k: float(v.data) for k, v in comps.items()}
    values["total"] = float(total.data)
    return total, values


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_probs(model: TransformerClassifier, split: EncodedSplit) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for b in split.batches(EVAL_BATCH):
            chunks.append(forward(model, b).probs.data)
    return np.concatenate(chunks)


def evaluate(model: TransformerClassifier, split: EncodedSplit) -> tuple[float, float]:
    """(mean CE, accuracy in percent) with dropout off."""
    probs = predict_probs(model, split)
    picked = probs[np.arange(len(split)), split.labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    return loss, 100.0 * float(np.mean(probs.argmax(-1) == split.labels))


def saliency_maps(model, split: EncodedSplit, vocab: Vocab | None = None):
    maps = []
    for b in split.batches(EVAL_BATCH):
        maps.extend(grad_saliency(model, b, vocab.tokens if vocab else None))
    return maps


def eval_loyalty(
    teacher: TransformerClassifier,
    student: TransformerClassifier,
    split: EncodedSplit,
    teacher_vocab: list[str] | None = None,
    student_vocab: list[str] | None = None,
) -> LoyaltyReport:
    if teacher_vocab is not None and student_vocab is not None and teacher_vocab != student_vocab:
        raise ValueError("teacher and student vocabularies differ")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student vocabulary sizes differ")
    return loyalty_report(
        predict_probs(teacher, split),
        predict_probs(student, split),
        saliency_maps(teacher, split),
        saliency_maps(student, split),
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _fit(
    model: TransformerClassifier,
    objective,
    splits: dict[str, EncodedSplit],
    optim: OptimConfig,
    shuffle_seed: int,
    dropout: DropoutSpec,
) -> tuple[list[dict], dict, list[float]]:
    rng = np.random.default_rng(shuffle_seed)
    params = model.trainable()
    opt = Adam(params, optim)
    epochs, step_losses, step0 = [], [], {}
    for epoch in range(1, optim.epochs + 1):
        sums = dict.fromkeys(("total",) + COMPONENTS, 0.0)
        n_steps = 0
        for batch in splits["train"].batches(optim.batch_size, rng):
            total, values = objective(batch, dropout)
            if not np.isfinite(values["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {n_steps}")
            names = list(params)
            grads = ad.grad(total, [params[k] for k in names])
            opt.step({k: g.data for k, g in zip(names, grads)})
            if not step0:
                step0 = values
            step_losses.append(values["total"])
            for k in sums:
                sums[k] += values[k]
            n_steps += 1
        val_loss, val_acc = evaluate(model, splits["val"])
        row = {"epoch": epoch, "train_loss": sums["total"] / max(n_steps, 1)}
        row.update({f"train_{k}": sums[k] / max(n_steps, 1) for k in COMPONENTS})
        row.update({"val_loss": val_loss, "val_acc": val_acc})
        epochs.append(row)
        log.info("epoch %d: train %.4f val_acc %.2f", epoch, row["train_loss"], val_acc)
    return epochs, step0, step_losses


def prepare_data(cfg: ExperimentConfig) -> tuple[Vocab, dict[str, EncodedSplit], Path]:
    data_dir = cfg.data_dir
    if data_dir is None:
        data_dir = Path(cfg.out_dir) / "data"
        if not (data_dir / "vocab.txt").exists():
            generate_synthetic_dataset(cfg.synthetic, cfg.seed, data_dir)
    vocab, splits = load_dataset(data_dir, cfg.teacher.max_len)
    for name in ("train", "val", "test"):
        if name not in splits:
            raise ConfigError(f"dataset at {data_dir} is missing the {name} split")
    return vocab, splits, Path(data_dir)


def _with_vocab(mc, vocab: Vocab):
    return replace(mc, vocab_size=len(vocab))


def train_teacher(
    cfg: ExperimentConfig, data=None, write: bool = True
) -> tuple[TransformerClassifier, RunResult]:
    """CE fine-tuning of the teacher from a seeded random init, dropout on."""
    cfg.validate()
    t0 = time.perf_counter()
    vocab, splits, _ = data if data is not None else prepare_data(cfg)
    init_seed, shuffle_seed, drop_seed = _derive_seeds(cfg.seed)
    mcfg = _with_vocab(cfg.teacher, vocab)
    model = TransformerClassifier.init(mcfg, init_seed)
    dropout = DropoutSpec(mcfg.dropout_rate, "active", drop_seed)

    def objective(batch, drop):
        out = forward(model, batch, drop)
        ce = cross_entropy(out.probs, batch.labels)
        v = float(ce.data)
        return ce, {"total": v, "ce": v, "soft": 0.0, "pkd": 0.0, "gkd": 0.0, "gkd_cls": 0.0}

    epochs, step0, step_losses = _fit(model, objective, splits, cfg.teacher_optim, shuffle_seed, dropout)
    _, test_acc = evaluate(model, splits["test"])
    result = RunResult(
        epochs=epochs,
        test_acc=test_acc,
        config_hash=cfg.config_hash(),
        step0=step0,
        step_losses=step_losses,
        dropout_draws=dropout.draws,
        wall_clock_seconds=time.perf_counter() - t0,
    )
    if write:
        out = Path(cfg.out_dir)
        save_checkpoint(out / "teacher.npz", model, vocab.tokens)
        write_run(out, cfg, result)
    return model, result


def build_student(cfg: ExperimentConfig, teacher: TransformerClassifier, vocab: Vocab):
    init_seed, _, _ = _derive_seeds(cfg.seed)
    scfg = _with_vocab(cfg.student, vocab)
    if cfg.method == "finetune":
        student = TransformerClassifier.init(scfg, init_seed)
    else:
        check_widths(teacher.config, scfg)
        student = init_student_from_teacher(teacher, scfg.n_layers)
        student.config = scfg
    if cfg.freeze_student_embeddings:
        freeze_embeddings(student)
    return student


def distill(
    cfg: ExperimentConfig,
    teacher: TransformerClassifier,
    data=None,
    write: bool = True,
    teacher_vocab: list[str] | None = None,
) -> tuple[TransformerClassifier, RunResult]:
    """Train a student with ``cfg.method``; the teacher stays fixed with dropout off."""
    cfg.validate()
    t0 = time.perf_counter()
    vocab, splits, _ = data if data is not None else prepare_data(cfg)
    if teacher_vocab is not None and teacher_vocab != vocab.tokens:
        raise ValueError("teacher vocabulary does not match the dataset vocabulary")
    if teacher.config.vocab_size != len(vocab):
        raise ValueError("teacher vocabulary size does not match the dataset")
    _, shuffle_seed, drop_seed = _derive_seeds(cfg.seed)
    teacher.requires_grad_(False)
    student = build_student(cfg, teacher, vocab)
    skip = None
    if cfg.method in ("bert_pkd", "gkd_cls"):
        skip = build_skip_map(student.config.n_layers, teacher.config.n_layers)
    mode = "active" if cfg.student_dropout_active else "deactivated"
    dropout = DropoutSpec(student.config.dropout_rate, mode, drop_seed)

    def objective(batch, drop):
        signals = None if cfg.method == "finetune" else teacher_signals(teacher, batch, cfg.method, skip)
        return student_objective(cfg.method, student, batch, cfg.weights, signals, skip, drop)

    epochs, step0, step_losses = _fit(student, objective, splits, cfg.optim, shuffle_seed, dropout)
    _, test_acc = evaluate(student, splits["test"])
    loyalty = eval_loyalty(teacher, student, splits["test"])
    result = RunResult(
        epochs=epochs,
        test_acc=test_acc,
        config_hash=cfg.config_hash(),
        step0=step0,
        step_losses=step_losses,
        dropout_draws=dropout.draws,
        loyalty=json.loads(loyalty.to_json()),
        wall_clock_seconds=time.perf_counter() - t0,
    )
    if write:
        out = Path(cfg.out_dir)
        save_checkpoint(out / "student.npz", student, vocab.tokens)
        write_run(out, cfg, result)
        (out / "loyalty.json").write_text(loyalty.to_json(), encoding="utf-8")
        sample = splits["test"].words[:SALIENCY_SAMPLE]
        emit_saliency_report(
            [("teacher", teacher, vocab.tokens), (cfg.method, student, vocab.tokens)], sample, out / "saliency.html"
        )
    return student, result


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "train_loss") + tuple(f"train_{k}" for k in COMPONENTS) + ("val_loss", "val_acc")


def metrics_csv(epochs: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in epochs:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def write_run(out: Path, cfg: ExperimentConfig, result: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(metrics_csv(result.epochs), encoding="utf-8")
    (out / "result.json").write_text(result.to_json(), encoding="utf-8")


def load_teacher(path) -> tuple[TransformerClassifier, list[str] | None]:
    model, vocab = load_checkpoint(path)
    return model.requires_grad_(False), vocab
