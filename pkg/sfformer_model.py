# sfformer_model.py
"""
SFFormer: per-cluster feature tokenizer + encoder-only transformer with a CLS
regression head.

Each cluster feature x_j becomes a token x_j * W_j + b_j; a learned CLS token
is prepended, so a stream is a (C+1) x d sequence. There is no positional
encoding: cluster identity lives in the per-cluster tokenizer weights.

    self_baseline  every layer self-attends over the primary stream
    cross_fusion   the primary stream supplies queries; a helper feature
                   stream, tokenized with its own weights and normalized with
                   a per-layer key/value layer-norm, supplies keys and values

Layers use pre-norm residual wiring:
    u   = q + drop_res(MHA(LN(q), LN(kv)))
    out = u + drop_res(FFN(LN(u)))       FFN = W2 . drop_ffn(ReGLU(W1 . x))
"""
import logging
import math
from enum import Enum
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensor_core as tc
from errors import DataError, UsageError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

N_HEADS = 8


class FusionMode(str, Enum):
    SELF_BASELINE = "self_baseline"
    CROSS_FUSION = "cross_fusion"


class Readout(str, Enum):
    CLS = "cls"
    MEAN = "mean"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    cluster_count: int = Field(ge=1)
    token_dim: int = Field(ge=1)
    n_layers: int = Field(default=1, ge=1, le=4)
    n_heads: int = Field(default=N_HEADS, ge=1)
    dropout_attn: float = Field(default=0.0, ge=0.0, le=0.5)
    dropout_ffn: float = Field(default=0.0, ge=0.0, le=0.5)
    dropout_residual: float = Field(default=0.0, ge=0.0, le=0.2)
    fusion_mode: FusionMode = FusionMode.SELF_BASELINE
    readout: Readout = Readout.CLS
    helper_evolves: bool = False
    share_tokenizer: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def heads_divide_tokens(self):
        if self.token_dim % self.n_heads:
            raise ValueError(f"token_dim {self.token_dim} is not divisible by {self.n_heads} heads")
        return self

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        hidden = int(round(4 * self.token_dim / 3))
        return hidden + hidden % 2

    @property
    def is_fusion(self) -> bool:
        return self.fusion_mode == FusionMode.CROSS_FUSION

    def to_text(self) -> str:
        return "".join(
            f"{key}={value.value if isinstance(value, Enum) else value}\n"
            for key, value in self.model_dump().items()
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if "=" not in line:
                raise DataError(f"model config line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        return cls.model_validate(fields)


class ModelParams:
    """All SFFormer weights as named trainable tensors."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, named: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(named)
        unexpected = set(named) - set(self.tensors)
        if missing or unexpected:
            raise DataError(f"Checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, t in self.tensors.items():
            if named[name].shape != t.shape:
                raise DataError(f"Checkpoint tensor {name} has shape {named[name].shape}, expected {t.shape}")
            t.data = np.array(named[name], dtype=np.float64)
            t.zero_grad()

    def copy(self) -> "ModelParams":
        clone = init_params(self.config)
        clone.load_arrays(self.named_arrays())
        return clone

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig) -> ModelParams:
    """He-normal weights, zero biases, uniform tokenizer biases; fully determined by config.seed."""
    rng = np.random.default_rng(config.seed)
    d, f, C = config.token_dim, config.ffn_hidden, config.cluster_count
    tensors: dict[str, Tensor] = {}

    def add(name: str, data: np.ndarray) -> None:
        tensors[name] = Tensor(data, requires_grad=True, name=name)

    def he(fan_in: int, shape) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    def tokenizer(prefix: str) -> None:
        add(f"{prefix}.tok_w", he(1, (C, d)))
        bound = 1.0 / math.sqrt(d)
        add(f"{prefix}.tok_b", rng.uniform(-bound, bound, size=(C, d)))

    def norm(prefix: str) -> None:
        add(f"{prefix}.gain", np.ones(d))
        add(f"{prefix}.shift", np.zeros(d))

    tokenizer("primary")
    if config.is_fusion and not config.share_tokenizer:
        tokenizer("helper")
    add("cls", he(d, (d,)))

    for i in range(config.n_layers):
        p = f"layers.{i}"
        norm(f"{p}.norm_q")
        if config.is_fusion:
            norm(f"{p}.norm_kv")
        for proj in ("q", "k", "v", "o"):
            add(f"{p}.attn.w{proj}", he(d, (d, d)))
            add(f"{p}.attn.b{proj}", np.zeros(d))
        norm(f"{p}.norm_ffn")
        add(f"{p}.ffn.w1", he(d, (d, 2 * f)))
        add(f"{p}.ffn.b1", np.zeros(2 * f))
        add(f"{p}.ffn.w2", he(f, (f, d)))
        add(f"{p}.ffn.b2", np.zeros(d))

    norm("head.norm")
    add("head.w", he(d, (d, 1)))
    add("head.b", np.zeros(1))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _as_batch(x, cluster_count: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), copy=False)
    if x.data.ndim == 1:
        x = tc.reshape(x, (1, x.shape[0]))
    if x.data.ndim != 2 or x.shape[1] != cluster_count:
        raise DataError(f"Expected {cluster_count} cluster features per subject, got input of shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise DataError("Feature input contains non-finite values")
    return x


def tokenize(x, weights: Tensor, biases: Tensor, cls: Tensor) -> Tensor:
    """(B, C) features -> (B, C+1, d) tokens; token_j = x_j * W_j + b_j, CLS at position 0."""
    C, d = weights.shape
    x = _as_batch(x, C)
    batch = x.shape[0]
    tokens = tc.add(tc.mul(tc.reshape(x, (batch, C, 1)), weights), biases)
    cls_rows = tc.broadcast_to(tc.reshape(cls, (1, 1, d)), (batch, 1, d))
    return tc.concat([cls_rows, tokens], axis=1)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, d = x.shape
    return tc.transpose(tc.reshape(x, (batch, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, n_heads, length, head_dim = x.shape
    return tc.reshape(tc.transpose(x, (0, 2, 1, 3)), (batch, length, n_heads * head_dim))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tc.add(tc.matmul(x, w), b)


def multi_head_attention(
    q_tokens: Tensor,
    kv_tokens: Tensor,
    params: ModelParams,
    layer: int,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_probs: bool = False,
):
    """Scaled dot-product attention per head, heads concatenated and output-projected."""
    config = params.config
    if q_tokens.shape != kv_tokens.shape:
        raise DataError(f"Query tokens {q_tokens.shape} and key/value tokens {kv_tokens.shape} differ in shape")
    p = f"layers.{layer}.attn"
    q = _split_heads(_linear(q_tokens, params[f"{p}.wq"], params[f"{p}.bq"]), config.n_heads)
    k = _split_heads(_linear(kv_tokens, params[f"{p}.wk"], params[f"{p}.bk"]), config.n_heads)
    v = _split_heads(_linear(kv_tokens, params[f"{p}.wv"], params[f"{p}.bv"]), config.n_heads)

    scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(config.head_dim))
    probs = tc.softmax(scores)
    attended = tc.matmul(tc.dropout(probs, config.dropout_attn, train, rng), v)
    out = _linear(_merge_heads(attended), params[f"{p}.wo"], params[f"{p}.bo"])
    if return_probs:
        return out, probs.data
    return out


def _norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return tc.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.shift"])


def feed_forward(x: Tensor, params: ModelParams, layer: int, train: bool, rng) -> Tensor:
    p = f"layers.{layer}.ffn"
    hidden = tc.reglu(_linear(x, params[f"{p}.w1"], params[f"{p}.b1"]))
    hidden = tc.dropout(hidden, params.config.dropout_ffn, train, rng)
    return _linear(hidden, params[f"{p}.w2"], params[f"{p}.b2"])


def encoder_layer(
    q_tokens: Tensor,
    kv_tokens: Tensor,
    params: ModelParams,
    layer: int,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Pre-norm attention block followed by a pre-norm ReGLU feed-forward block."""
    config = params.config
    p = f"layers.{layer}"
    q_norm = _norm(q_tokens, params, f"{p}.norm_q")
    if kv_tokens is q_tokens:
        kv_norm = q_norm
    elif f"{p}.norm_kv.gain" in params:
        kv_norm = _norm(kv_tokens, params, f"{p}.norm_kv")
    else:
        kv_norm = _norm(kv_tokens, params, f"{p}.norm_q")

    attn = multi_head_attention(q_norm, kv_norm, params, layer, train, rng)
    u = tc.add(q_tokens, tc.dropout(attn, config.dropout_residual, train, rng))
    ffn = feed_forward(_norm(u, params, f"{p}.norm_ffn"), params, layer, train, rng)
    return tc.add(u, tc.dropout(ffn, config.dropout_residual, train, rng))


def forward(
    primary_x,
    helper_x,
    params: ModelParams,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Predictions of shape (B,) for a (B, C) batch (a single length-C vector gives B = 1)."""
    config = params.config
    if config.is_fusion and helper_x is None:
        raise UsageError("cross_fusion mode needs a helper feature input")
    if not config.is_fusion and helper_x is not None:
        raise UsageError("self_baseline mode takes no helper feature input")

    q = tokenize(primary_x, params["primary.tok_w"], params["primary.tok_b"], params["cls"])
    if config.is_fusion:
        stream = "primary" if config.share_tokenizer else "helper"
        h = tokenize(helper_x, params[f"{stream}.tok_w"], params[f"{stream}.tok_b"], params["cls"])
        if h.shape != q.shape:
            raise DataError(f"Helper input tokens {h.shape} do not match primary tokens {q.shape}")
        for layer in range(config.n_layers):
            q_next = encoder_layer(q, h, params, layer, train, rng)
            if config.helper_evolves:
                h = encoder_layer(h, q, params, layer, train, rng)
            q = q_next
    else:
        for layer in range(config.n_layers):
            q = encoder_layer(q, q, params, layer, train, rng)

    if config.readout == Readout.MEAN:
        pooled = tc.mean(tc.slice_(q, (slice(None), slice(1, None))), axis=1)
    else:
        pooled = tc.slice_(q, (slice(None), 0))
    out = _linear(_norm(pooled, params, "head.norm"), params["head.w"], params["head.b"])
    return tc.reshape(out, (out.shape[0],))


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def model_gradcheck_cases(
    rng: np.random.Generator, cluster_count: int = 8, token_dim: int = 16
) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """Gradchecks for the tokenizer, attention, encoder layer and both full forwards at tiny sizes."""
    base = ModelConfig(cluster_count=cluster_count, token_dim=token_dim, n_layers=1, seed=int(rng.integers(1 << 31)))
    fusion = base.model_copy(update={"fusion_mode": FusionMode.CROSS_FUSION})
    x = rng.normal(size=(3, cluster_count))
    helper = rng.normal(size=(3, cluster_count))
    y = rng.normal(size=3)
    params = init_params(base)
    fusion_params = init_params(fusion)
    # random norm gains/shifts so those gradients are not evaluated at a symmetric point
    for p in (params, fusion_params):
        for name, t in p.tensors.items():
            if name.endswith(".gain") or name.endswith(".shift"):
                t.data = t.data + rng.normal(scale=0.1, size=t.shape)

    T = cluster_count + 1
    w_tok = rng.normal(size=(3, T, token_dim))

    def tokens():
        return tokenize(x, params["primary.tok_w"], params["primary.tok_b"], params["cls"])

    def layer_inputs():
        return [params[n] for n in params.tensors if n.startswith("layers.0.")]

    return [
        ("tokenize", lambda: tc.projected(tokens(), w_tok),
         [params["primary.tok_w"], params["primary.tok_b"], params["cls"]]),
        ("multi_head_attention", lambda: tc.projected(multi_head_attention(tokens(), tokens(), params, 0), w_tok),
         [params[n] for n in params.tensors if n.startswith("layers.0.attn.")] + [params["primary.tok_w"]]),
        ("encoder_layer", lambda: tc.projected(encoder_layer(tokens(), tokens(), params, 0), w_tok),
         layer_inputs()),
        ("sfformer_forward_self", lambda: tc.mse_loss(forward(x, None, params), y), params.parameters()),
        ("sfformer_forward_cross", lambda: tc.mse_loss(forward(x, helper, fusion_params), y),
         fusion_params.parameters()),
    ]
