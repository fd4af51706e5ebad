"""Small post-LN transformer encoder classifier with switchable dropout."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2

EMBEDDING_PARAMS = ("tok_emb", "pos_emb", "emb_ln_g", "emb_ln_b")
LN_EPS = 1e-5
MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    max_len: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 128
    n_classes: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")


@dataclass
class Batch:
    """token_ids has [CLS] at position 0; lengths count [CLS] plus word tokens."""

    token_ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.token_ids.shape[0] == 0:
            raise ValueError("empty or malformed batch")
        b, t = self.token_ids.shape
        if self.lengths.shape != (b,) or self.labels.shape != (b,):
            raise ValueError("lengths/labels do not match batch size")
        if np.any(self.lengths <= 0) or np.any(self.lengths > t):
            raise ValueError("lengths must lie in (0, seq]")

    @property
    def mask(self) -> np.ndarray:
        t = self.token_ids.shape[1]
        return (np.arange(t)[None, :] < self.lengths[:, None]).astype(np.float64)

    def __len__(self):
        return self.token_ids.shape[0]


@dataclass
class DropoutSpec:
    """Scaled-Bernoulli dropout. ``draws`` counts masks sampled so far."""

    rate: float = 0.0
    mode: str = "deactivated"
    seed: int = 0
    draws: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("active", "deactivated"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")
        self._rng = np.random.default_rng(self.seed)

    @property
    def active(self) -> bool:
        return self.mode == "active" and self.rate > 0.0

    def sample_mask(self, shape) -> np.ndarray:
        self.draws += 1
        keep = self._rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


def deactivated() -> DropoutSpec:
    return DropoutSpec(0.0, "deactivated")


def apply_dropout(x: Tensor, spec: DropoutSpec) -> Tensor:
    if not spec.active:
        return x
    return ad.mul(x, spec.sample_mask(x.shape))


@dataclass
class ModelOutputs:
    logits: Tensor
    probs: Tensor
    max_prob: Tensor
    hidden_states: list[Tensor]
    input_embeddings: Tensor
    pooled: Tensor

    @property
    def cls_hidden(self) -> list[Tensor]:
        return [ad.index_select(h, 0, axis=1) for h in self.hidden_states]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs.data, axis=-1)


class TransformerClassifier:
    """Parameters as named leaf tensors; ``requires_grad`` marks the trainable set."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def requires_grad_(self, flag: bool) -> "TransformerClassifier":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TransformerClassifier":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        p: dict[str, np.ndarray] = {
            "tok_emb": normal(config.vocab_size, d),
            "pos_emb": normal(config.max_len, d),
            "emb_ln_g": np.ones(d),
            "emb_ln_b": np.zeros(d),
        }
        for k in range(config.n_layers):
            pre = f"layers.{k}."
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = normal(d, d)
                p[pre + "b" + w[1]] = np.zeros(d)
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            p[pre + "w1"] = normal(d, f)
            p[pre + "b1"] = np.zeros(f)
            p[pre + "w2"] = normal(f, d)
            p[pre + "b2"] = np.zeros(d)
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
        p["cls_w"] = normal(d, config.n_classes)
        p["cls_b"] = np.zeros(config.n_classes)
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w) + b
    return ad.reshape(y, lead + (w.shape[-1],))


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * g + b


def _attention(x: Tensor, p, pre: str, n_heads: int, bias: np.ndarray) -> Tensor:
    bsz, t, d = x.shape
    dh = d // n_heads

    def heads(z):
        return ad.transpose(ad.reshape(z, (bsz, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, p[pre + "wq"], p[pre + "bq"]))
    k = heads(_linear(x, p[pre + "wk"], p[pre + "bk"]))
    v = heads(_linear(x, p[pre + "wv"], p[pre + "bv"]))
    scores = ad.matmul(q, ad.swapaxes(k)) * (1.0 / np.sqrt(dh)) + bias
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return _linear(ctx, p[pre + "wo"], p[pre + "bo"])


def forward(
    model: TransformerClassifier,
    batch: Batch,
    dropout: DropoutSpec | None = None,
    embeddings: Tensor | None = None,
) -> ModelOutputs:
    """Run the encoder.

    ``input_embeddings`` in the result is the token-embedding activation
    that gradient-alignment and saliency differentiate against. When the
    token table is frozen it is a fresh leaf; otherwise it is the lookup
    node. Pass ``embeddings`` to substitute that activation directly.
    """
    cfg = model.config
    dropout = dropout or deactivated()
    ids = batch.token_ids
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ValueError(f"token id out of vocabulary (vocab_size={cfg.vocab_size})")
    bsz, t = ids.shape
    if t > cfg.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    p = model.params

    if embeddings is None:
        tok = p["tok_emb"]
        if tok.requires_grad:
            embeddings = ad.index_select(tok, ids, axis=0)
        else:
            embeddings = Tensor(tok.data[ids], requires_grad=ad.is_grad_enabled())
    elif embeddings.shape != (bsz, t, cfg.d_model):
        raise ad.ShapeError(f"embeddings shape {embeddings.shape} does not match batch")

    pos = ad.index_select(p["pos_emb"], np.arange(t), axis=0)
    x = layer_norm(embeddings + pos, p["emb_ln_g"], p["emb_ln_b"])
    x = apply_dropout(x, dropout)

    bias = ((1.0 - batch.mask) * MASK_BIAS)[:, None, None, :]
    hidden = []
    for k in range(cfg.n_layers):
        pre = f"layers.{k}."
        a = apply_dropout(_attention(x, p, pre, cfg.n_heads, bias), dropout)
        x = layer_norm(x + a, p[pre + "ln1_g"], p[pre + "ln1_b"])
        ff = _linear(ad.gelu(_linear(x, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])
        x = layer_norm(x + apply_dropout(ff, dropout), p[pre + "ln2_g"], p[pre + "ln2_b"])
        hidden.append(x)

    pooled = ad.index_select(x, 0, axis=1)
    logits = ad.matmul(pooled, p["cls_w"]) + p["cls_b"]
    probs = ad.softmax(logits)
    return ModelOutputs(
        logits=logits,
        probs=probs,
        max_prob=ad.max_last(probs),
        hidden_states=hidden,
        input_embeddings=embeddings,
        pooled=pooled,
    )


def init_student_from_teacher(
    teacher: TransformerClassifier, student_n_layers: int
) -> TransformerClassifier:
    """Copy embeddings, the first ``student_n_layers`` blocks and the head."""
    tc = teacher.config
    if student_n_layers > tc.n_layers:
        raise ValueError(
            f"student depth {student_n_layers} exceeds teacher depth {tc.n_layers}"
        )
    cfg = ModelConfig(**{**asdict(tc), "n_layers": student_n_layers})
    params = {}
    for name, t in teacher.params.items():
        if name.startswith("layers.") and int(name.split(".")[1]) >= student_n_layers:
            continue
        params[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
    return TransformerClassifier(cfg, params)


def check_widths(a: ModelConfig, b: ModelConfig) -> None:
    for f in ("vocab_size", "max_len", "d_model", "n_heads", "d_ff", "n_classes"):
        if getattr(a, f) != getattr(b, f):
            raise ValueError(f"width mismatch on {f}: {getattr(a, f)} vs {getattr(b, f)}")


def freeze_embeddings(model: TransformerClassifier) -> TransformerClassifier:
    for name in EMBEDDING_PARAMS:
        model.params[name].requires_grad = False
    return model


def save_checkpoint(path, model: TransformerClassifier, vocab: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": asdict(model.config),
        "frozen": sorted(k for k, p in model.params.items() if not p.requires_grad),
        "vocab": vocab,
        "param_names": list(model.params),
    }
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[TransformerClassifier, list[str] | None]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        frozen = set(meta["frozen"])
        params = {
            k: Tensor(np.array(z[f"param/{k}"]), requires_grad=k not in frozen, name=k)
            for k in meta["param_names"]
        }
    return TransformerClassifier(ModelConfig(**meta["config"]), params), meta["vocab"]
