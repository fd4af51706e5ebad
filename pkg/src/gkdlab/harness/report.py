"""Colorized saliency rendering (green = positive, red = negative)."""

from __future__ import annotations

import html
from pathlib import Path

import numpy as np

from ..metrics import SALIENCY_DEFINITION, SaliencyMap, grad_saliency
from .data import Vocab, encode_rows

FORMATS = ("ansi", "html")


def intensities(m: SaliencyMap) -> np.ndarray:
    top = m.scores.max()
    return m.scores / top if top > 0 else np.zeros_like(m.scores)


def _rgb(sign: float, a: float) -> tuple[int, int, int]:
    base = (0, 160, 0) if sign >= 0 else (200, 0, 0)
    return tuple(int(round(255 + (c - 255) * a)) for c in base)


def _html_row(name: str, m: SaliencyMap) -> str:
    spans = []
    for tok, s, a in zip(m.tokens, m.signs, intensities(m)):
        alpha = f"{a:.3f}"
        color = "0,160,0" if s >= 0 else "200,0,0"
        spans.append(
            f'<span class="tok" style="background-color: rgba({color},{alpha})" '
            f'title="{a:.4f}">{html.escape(tok)}</span>'
        )
    return (
        f"<tr><td>{html.escape(name)}</td><td>{m.predicted_class}</td>"
        f"<td>{m.max_prob:.4f}</td><td>{' '.join(spans)}</td></tr>"
    )


def _ansi_row(name: str, m: SaliencyMap) -> str:
    parts = []
    for tok, s, a in zip(m.tokens, m.signs, intensities(m)):
        r, g, b = _rgb(s, float(a))
        parts.append(f"\x1b[48;2;{r};{g};{b}m\x1b[30m{tok}\x1b[0m")
    return f"{name:<16} class={m.predicted_class} p={m.max_prob:.4f}  " + " ".join(parts)


def render(rows: list[list[tuple[str, SaliencyMap]]], fmt: str) -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
    if fmt == "ansi":
        lines = [f"# {SALIENCY_DEFINITION}"]
        for i, group in enumerate(rows):
            lines.append(f"sentence {i}")
            lines.extend(_ansi_row(name, m) for name, m in group)
        return "\n".join(lines) + "\n"
    body = []
    for i, group in enumerate(rows):
        body.append(f'<tr class="sentence"><th colspan="4">sentence {i}</th></tr>')
        body.extend(_html_row(name, m) for name, m in group)
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>saliency</title>"
        "<style>.tok{padding:1px 3px;margin:1px;border-radius:3px}</style></head><body>\n"
        f"<p>{html.escape(SALIENCY_DEFINITION)}</p>\n"
        "<table><tr><th>model</th><th>class</th><th>p_max</th><th>tokens</th></tr>\n"
        + "\n".join(body)
        + "\n</table></body></html>\n"
    )


def emit_saliency_report(models, sentences: list[list[str]], out_path, fmt: str = "html") -> Path:
    """``models`` is a list of (name, model, vocab tokens) triples."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
    if not sentences or any(len(s) == 0 for s in sentences):
        raise ValueError("saliency report needs nonempty sentences")
    per_model = []
    for name, model, vocab in models:
        v = Vocab(vocab)
        split = encode_rows([(0, s) for s in sentences], v, model.config.max_len)
        maps = grad_saliency(model, split.batch(range(len(split))), v.tokens)
        for m, words in zip(maps, sentences):
            m.tokens = list(words[: len(m.tokens)])  # show the input words, not [UNK]
        per_model.append((name, maps))
    rows = [[(name, maps[i]) for name, maps in per_model] for i in range(len(sentences))]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render(rows, fmt), encoding="utf-8")
    return out
