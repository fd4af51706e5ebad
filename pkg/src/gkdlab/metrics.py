"""Teacher/student behaviour consistency: label, probability and saliency loyalty.

Probability loyalty is 1 - Jensen-Shannon distance (base 2). Saliency uses
the L2 norm of each token's embedding gradient of the model's own top-class
probability. Both choices are recorded in every serialized report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Batch, TransformerClassifier, forward

PL_DEFINITION = "100 * mean(1 - sqrt(JS_base2(p_teacher, p_student)))"
SALIENCY_DEFINITION = "Grad: ||d p_max / d E_j||_2 over word tokens, normalized to sum 1"


@dataclass
class SaliencyMap:
    scores: np.ndarray
    signs: np.ndarray
    tokens: list[str]
    predicted_class: int
    max_prob: float
    degenerate: bool = False

    def __post_init__(self):
        if len(self.scores) == 0:
            raise ValueError("saliency map for an empty sentence")


@dataclass
class LoyaltyReport:
    label_loyalty: float
    probability_loyalty: float
    saliency_loyalty: float
    n_examples: int
    sl_excluded: int = 0
    definitions: dict = field(
        default_factory=lambda: {"PL": PL_DEFINITION, "SL": "100 * mean Pearson; " + SALIENCY_DEFINITION}
    )

    def to_json(self) -> str:
        d = asdict(self)
        d["saliency_loyalty"] = None if np.isnan(self.saliency_loyalty) else self.saliency_loyalty
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def label_loyalty(teacher_preds, student_preds) -> float:
    t = np.asarray(teacher_preds)
    s = np.asarray(student_preds)
    if t.shape != s.shape:
        raise ValueError(f"prediction arrays differ in length: {t.shape} vs {s.shape}")
    if t.size == 0:
        raise ValueError("no predictions")
    return 100.0 * float(np.mean(t == s))


def _kl2(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    ratio = np.divide(p, q, out=np.ones_like(p), where=p > 0)
    return np.sum(np.where(p > 0, p * np.log2(ratio), 0.0), axis=-1)


def js_distance(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    js = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return np.sqrt(np.clip(js, 0.0, 1.0))


def probability_loyalty(teacher_probs, student_probs) -> float:
    p = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    q = np.atleast_2d(np.asarray(student_probs, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"probability arrays differ in shape: {p.shape} vs {q.shape}")
    for name, arr in (("teacher", p), ("student", q)):
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError(f"{name} rows are not probability distributions")
    return 100.0 * float(np.mean(1.0 - js_distance(p, q)))


def grad_saliency(
    model: TransformerClassifier, batch: Batch, vocab: list[str] | None = None
) -> list[SaliencyMap]:
    """Per-sentence Grad saliency over word tokens ([CLS] excluded), dropout off."""
    if np.any(batch.lengths < 2):
        raise ValueError("empty sentence in saliency batch")
    emb = ad.Tensor(model.params["tok_emb"].data[batch.token_ids], requires_grad=True)
    with ad.set_grad_enabled(True):
        out = forward(model, batch, embeddings=emb)
        (g,) = ad.grad(ad.sum_(out.max_prob), [emb])
    g = g.data
    e = emb.data
    maps = []
    for i in range(len(batch)):
        n = int(batch.lengths[i])
        gi = g[i, 1:n]
        raw = np.linalg.norm(gi, axis=-1)
        total = raw.sum()
        degenerate = not total > 0
        scores = np.full(n - 1, 1.0 / (n - 1)) if degenerate else raw / total
        signs = np.sign(np.sum(gi * e[i, 1:n], axis=-1))
        ids = batch.token_ids[i, 1:n]
        tokens = [vocab[j] for j in ids] if vocab is not None else [str(j) for j in ids]
        maps.append(
            SaliencyMap(
                scores=scores,
                signs=signs,
                tokens=tokens,
                predicted_class=int(np.argmax(out.probs.data[i])),
                max_prob=float(out.max_prob.data[i]),
                degenerate=degenerate,
            )
        )
    return maps


def pearson(a, b) -> float:
    """Pearson correlation, NaN when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da @ da) * (db @ db))
    if not denom > 0:
        return float("nan")
    return float(np.clip((da @ db) / denom, -1.0, 1.0))


def saliency_correlations(teacher_maps, student_maps) -> np.ndarray:
    if len(teacher_maps) != len(student_maps):
        raise ValueError("saliency map lists differ in length")
    out = []
    for t, s in zip(teacher_maps, student_maps):
        if list(t.tokens) != list(s.tokens):
            raise ValueError("tokenization mismatch between teacher and student maps")
        out.append(pearson(t.scores, s.scores))
    return np.array(out)


def saliency_loyalty(teacher_maps, student_maps) -> float:
    """100 * mean Pearson over sentences; zero-variance sentences are skipped."""
    r = saliency_correlations(teacher_maps, student_maps)
    r = r[~np.isnan(r)]
    return 100.0 * float(r.mean()) if r.size else float("nan")


def loyalty_report(teacher_out, student_out, teacher_maps, student_maps) -> LoyaltyReport:
    """Assemble LL/PL/SL from already-computed probabilities and saliency maps."""
    tp, sp = np.asarray(teacher_out), np.asarray(student_out)
    r = saliency_correlations(teacher_maps, student_maps)
    valid = r[~np.isnan(r)]
    return LoyaltyReport(
        label_loyalty=label_loyalty(tp.argmax(-1), sp.argmax(-1)),
        probability_loyalty=probability_loyalty(tp, sp),
        saliency_loyalty=100.0 * float(valid.mean()) if valid.size else float("nan"),
        n_examples=int(tp.shape[0]),
        sl_excluded=int(np.isnan(r).sum()),
    )
