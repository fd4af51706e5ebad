"""Expected gradients under dropout.

On quadratics the second-order Taylor expansion is exact, so the closed-form
bias ``delta/(1-delta) * diag(A) * x0`` can be checked against an exact
enumeration of all masks. On transformers the bias is measured as the
cosine between the Monte Carlo dropout-on gradient and the clean gradient.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Batch, DropoutSpec, TransformerClassifier, forward

MAX_ENUM_DIM = 20

SITES_NOTE = "dropout active at every site (embeddings, attention output, feed-forward output)"


@dataclass
class QuadraticFunction:
    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-12):
            raise ValueError("A must be symmetric")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError("b has the wrong length")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * x @ self.A @ x + self.b @ x + self.c

    def gradient(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=np.float64) + self.b

    def hessian(self) -> np.ndarray:
        return self.A

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "QuadraticFunction":
        m = rng.normal(size=(d, d))
        return cls((m + m.T) / 2, rng.normal(size=d), float(rng.normal()))


@dataclass
class BiasReport:
    exact_expectation: np.ndarray
    theorem_rhs: np.ndarray
    clean_gradient: np.ndarray
    delta: float

    @property
    def max_abs_discrepancy(self) -> float:
        return float(np.max(np.abs(self.exact_expectation - self.theorem_rhs)))


def _check_delta(delta: float) -> None:
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")


def exact_dropout_gradient_expectation(f: QuadraticFunction, x0, delta: float) -> np.ndarray:
    """Sum of P(mask) * d/dx0 f(x0 * xi(mask)) over all 2^d keep/drop masks.

    The gradient is taken with respect to x0, so the chain rule contributes
    the mask once more: ``xi * grad f(x0 * xi)``.
    """
    _check_delta(delta)
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    if d > MAX_ENUM_DIM:
        raise ValueError(f"exact enumeration limited to d <= {MAX_ENUM_DIM}, got {d}")
    keep = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.float64)
    n_keep = keep.sum(axis=1)
    prob = (1.0 - delta) ** n_keep * delta ** (d - n_keep)
    xi = keep / (1.0 - delta)
    grads = xi * ((x0 * xi) @ f.A.T + f.b)
    total = np.zeros(d)
    for p, g in zip(prob, grads):
        total += p * g
    return total


def theorem1_rhs(f: QuadraticFunction, x0, delta: float) -> np.ndarray:
    """Clean gradient plus the dropout-induced bias term."""
    _check_delta(delta)
    x0 = np.asarray(x0, dtype=np.float64)
    return f.gradient(x0) + delta / (1.0 - delta) * np.diag(f.hessian()) * x0


def bias_report(f: QuadraticFunction, x0, delta: float) -> BiasReport:
    return BiasReport(
        exact_expectation=exact_dropout_gradient_expectation(f, x0, delta),
        theorem_rhs=theorem1_rhs(f, x0, delta),
        clean_gradient=f.gradient(x0),
        delta=delta,
    )


def mc_quadratic_gradient(
    f: QuadraticFunction, x0, delta: float, n_samples: int, seed: int = 0
) -> np.ndarray:
    _check_delta(delta)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    xi = (rng.random((n_samples, x0.shape[0])) >= delta) / (1.0 - delta)
    return (xi * ((x0 * xi) @ f.A.T + f.b)).mean(axis=0)


def verify_theorem(
    n_trials: int = 100,
    deltas=(0.0, 0.1, 0.25, 0.5, 0.9),
    max_dim: int = 10,
    seed: int = 0,
) -> list[dict]:
    """Random-quadratic sweep; one row per delta with the worst discrepancy."""
    rng = np.random.default_rng(seed)
    rows = []
    for delta in deltas:
        worst = 0.0
        for _ in range(n_trials):
            d = int(rng.integers(1, max_dim + 1))
            f = QuadraticFunction.random(d, rng)
            x0 = rng.normal(size=d)
            worst = max(worst, bias_report(f, x0, delta).max_abs_discrepancy)
        rows.append({"delta": delta, "n_trials": n_trials, "max_abs_discrepancy": worst})
    return rows


# ---------------------------------------------------------------------------
# transformer measurements
# ---------------------------------------------------------------------------


def parse_target(target: str, n_layers: int) -> int | None:
    """``"input_embeddings"`` -> None, ``"cls_at_layer_k"`` -> k (1-based)."""
    if target == "input_embeddings":
        return None
    if target.startswith("cls_at_layer_"):
        try:
            k = int(target.rsplit("_", 1)[1])
        except ValueError:
            k = -1
        if 1 <= k <= n_layers:
            return k
    raise ValueError(f"invalid gradient target {target!r} for a {n_layers}-layer model")


def target_gradient(
    model: TransformerClassifier, batch: Batch, target: str, dropout: DropoutSpec
) -> np.ndarray:
    """d p_max / d target per example, flattened to [batch, features].

    Embedding gradients are zeroed at padding positions so examples of
    different lengths compare only over their real tokens.
    """
    layer = parse_target(target, model.config.n_layers)
    out = forward(model, batch, dropout)
    node = out.input_embeddings if layer is None else out.hidden_states[layer - 1]
    (g,) = ad.grad(ad.sum_(out.max_prob), [node])
    if layer is None:
        g = g.data * batch.mask[:, :, None]
    else:
        g = g.data[:, 0, :]
    return g.reshape(len(batch), -1)


def _tile(batch: Batch, k: int) -> Batch:
    return Batch(np.tile(batch.token_ids, (k, 1)), np.tile(batch.lengths, k), np.tile(batch.labels, k))


def mc_dropout_gradient(
    model: TransformerClassifier,
    batch: Batch,
    target: str,
    delta: float,
    n_samples: int,
    seed: int = 0,
    samples_per_pass: int = 1,
) -> np.ndarray:
    """Mean over ``n_samples`` dropout draws of the target gradient.

    With ``samples_per_pass > 1`` the batch is tiled so several independent
    draws share one forward pass; examples do not interact, so this only
    changes speed (and which random numbers land where).
    """
    if n_samples < 1 or samples_per_pass < 1:
        raise ValueError("n_samples and samples_per_pass must be at least 1")
    _check_delta(delta)
    parse_target(target, model.config.n_layers)
    spec = DropoutSpec(delta, "active", seed)
    if not spec.active:
        return target_gradient(model, batch, target, spec)
    n = len(batch)
    acc, done = None, 0
    while done < n_samples:
        k = min(samples_per_pass, n_samples - done)
        g = target_gradient(model, _tile(batch, k) if k > 1 else batch, target, spec)
        g = g.reshape(k, n, -1).sum(axis=0)
        acc = g if acc is None else acc + g
        done += k
    return acc / n_samples


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.divide((a * b).sum(axis=1), denom, out=np.ones_like(denom), where=denom > 0)
    return np.clip(cos, -1.0, 1.0)


def report_targets(n_layers: int) -> list[str]:
    return ["input_embeddings"] + [f"cls_at_layer_{k}" for k in range(1, n_layers)]


def cosine_similarity_report(
    model: TransformerClassifier,
    batch: Batch,
    delta: float,
    n_samples: int = 1000,
    seed: int = 0,
    targets: list[str] | None = None,
) -> list[dict]:
    """Per-target mean (and std) over examples of cos(E[grad | dropout], grad)."""
    if len(batch) == 0:
        raise ValueError("empty dataset")
    targets = targets or report_targets(model.config.n_layers)
    spec = DropoutSpec(delta, "active", seed)
    clean = {t: target_gradient(model, batch, t, DropoutSpec()) for t in targets}
    # one shared mask per sample across targets, so all targets see the same draws
    acc = {t: np.zeros_like(clean[t]) for t in targets}
    for _ in range(n_samples):
        out = forward(model, batch, spec)
        nodes = []
        for t in targets:
            layer = parse_target(t, model.config.n_layers)
            nodes.append(out.input_embeddings if layer is None else out.hidden_states[layer - 1])
        grads = ad.grad(ad.sum_(out.max_prob), nodes)
        for t, g in zip(targets, grads):
            layer = parse_target(t, model.config.n_layers)
            g = g.data * batch.mask[:, :, None] if layer is None else g.data[:, 0, :]
            acc[t] += g.reshape(len(batch), -1)
    rows = []
    for t in targets:
        cos = _cosine_rows(acc[t] / n_samples, clean[t])
        rows.append(
            {
                "target": t,
                "delta": delta,
                "n_samples": n_samples,
                "mean_cosine": float(cos.mean()),
                "std": float(cos.std()),
                "n_examples": len(batch),
            }
        )
    return rows


REPORT_COLUMNS = ("target", "delta", "n_samples", "mean_cosine", "std")


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r["target"], repr(r["delta"]), r["n_samples"], repr(r["mean_cosine"]), repr(r["std"])])
    return buf.getvalue()


def report_text(rows: list[dict]) -> str:
    lines = [f"# {SITES_NOTE}", f"{'target':<20} {'delta':>6} {'n_samples':>9} {'mean_cos':>9} {'std':>8}"]
    for r in rows:
        lines.append(
            f"{r['target']:<20} {r['delta']:>6.3f} {r['n_samples']:>9d} "
            f"{r['mean_cosine']:>9.4f} {r['std']:>8.4f}"
        )
    return "\n".join(lines) + "\n"
