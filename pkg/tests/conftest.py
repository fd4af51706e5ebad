import hypothesis
import numpy as np
import pytest

from gkdlab.model import CLS_ID, PAD_ID, Batch, ModelConfig, TransformerClassifier

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)


def make_batch(rng, batch_size=3, seq=6, vocab=30, n_classes=2, lengths=None):
    if lengths is None:
        lengths = rng.integers(2, seq + 1, size=batch_size)
        lengths[0] = seq
    ids = rng.integers(3, vocab, size=(batch_size, seq))
    ids[:, 0] = CLS_ID
    for i, n in enumerate(lengths):
        ids[i, n:] = PAD_ID
    return Batch(ids, np.asarray(lengths), rng.integers(0, n_classes, size=batch_size))


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=30, max_len=8, d_model=8, n_heads=2, n_layers=2, d_ff=16, n_classes=3,
                       dropout_rate=0.1)


@pytest.fixture
def tiny_model(tiny_config):
    model = TransformerClassifier.init(tiny_config, seed=3)
    # larger weights than the training init so gradients are far from degenerate
    rng = np.random.default_rng(11)
    for p in model.params.values():
        if p.data.ndim == 2:
            p.data = rng.normal(0, 0.5, size=p.data.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def component_loss(name, student, teacher, batch, tau=2.0):
    """One loss term through the student forward pass, as a scalar graph node.

    The teacher is a 2x deeper model whose signals are treated as constants.
    """
    from gkdlab import autodiff as ad
    from gkdlab.harness.train import teacher_signals
    from gkdlab.losses import build_skip_map, cross_entropy, gkd_cls_loss, gkd_loss, pkd_loss, soft_ce
    from gkdlab.model import forward

    skip = build_skip_map(student.config.n_layers, teacher.config.n_layers)
    sig = teacher_signals(teacher, batch, "gkd_cls", skip)
    out = forward(student, batch)
    if name == "ce":
        return cross_entropy(out.probs, batch.labels)
    if name == "soft_ce":
        return soft_ce(sig.logits, out.logits, tau)
    s_layers = list(skip.student_layers)
    if name == "pkd":
        s_cls = [ad.index_select(out.hidden_states[k - 1], 0, axis=1) for k in s_layers]
        return pkd_loss(s_cls, sig.cls, skip)
    nodes = [out.input_embeddings] + [out.hidden_states[k - 1] for k in s_layers]
    grads = ad.grad(ad.sum_(out.max_prob), nodes, create_graph=True)
    if name == "gkd":
        return gkd_loss(grads[0], sig.emb_grad, batch.lengths)
    if name == "gkd_cls":
        return gkd_cls_loss([ad.index_select(g, 0, axis=1) for g in grads[1:]], sig.cls_grads, skip)
    raise ValueError(name)


def perturbed(model, seed, scale):
    """Copy of ``model`` with every parameter jittered by N(0, scale)."""
    from gkdlab.model import TransformerClassifier

    rng = np.random.default_rng(seed)
    m = TransformerClassifier.init(model.config, 0)
    for k, p in model.params.items():
        m.params[k].data = p.data + rng.normal(0, scale, size=p.data.shape)
    return m


# --- acceptance summary -----------------------------------------------------


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one PASS/FAIL line for the summary."""
    lines = request.config._acceptance_lines

    def record(n, ok, detail):
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
