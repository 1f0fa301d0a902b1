"""Decoder-only transformer with pre-norm residual blocks.

Each block is one attention + MLP residual update ``x + f(x, theta)``. Blocks
are exposed individually (:func:`layer_apply`) so callers can route the
residual stream through any sequence of layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 8
    max_seq_len: int = 64
    norm_eps: float = 1e-6
    seed: int = 0
    activation: str = "silu"
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.activation not in ("silu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    attn_norm: Tensor
    mlp_norm: Tensor

    FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2", "attn_norm", "mlp_norm")

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    unembed: Tensor
    extra: dict[str, Tensor] = field(default_factory=dict)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{f}", getattr(layer, f)) for f in LayerParams.FIELDS]
        out += [("final_norm", self.final_norm), ("unembed", self.unembed)]
        out += sorted(self.extra.items())
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "ModelParams":
        def c(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad, _trusted=True)

        return ModelParams(
            self.config,
            c(self.embed),
            [LayerParams(*[c(t) for t in layer.tensors()]) for layer in self.layers],
            c(self.final_norm),
            c(self.unembed),
            {k: c(v) for k, v in self.extra.items()},
        )

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad = flag
        return self


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded init: N(0, 1/fan_in) projections, residual outputs shrunk by sqrt(2L)."""
    rng = np.random.default_rng(config.seed)
    d, f, v, n_layers = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    out_scale = 1.0 / np.sqrt(2.0 * n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), _trusted=True)

    embed = normal((v, d), 1.0)
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerParams(
                wq=normal((d, d), d**-0.5),
                wk=normal((d, d), d**-0.5),
                wv=normal((d, d), d**-0.5),
                wo=normal((d, d), d**-0.5 * out_scale),
                w1=normal((d, f), d**-0.5),
                w2=normal((f, d), f**-0.5 * out_scale),
                attn_norm=tc.ones((d,)),
                mlp_norm=tc.ones((d,)),
            )
        )
    # small readout keeps the initial logits near uniform
    unembed = normal((d, v), 0.5 * d**-0.5)
    return ModelParams(config, embed, layers, tc.ones((d,)), unembed)


@lru_cache(maxsize=64)
def rope_tables(seq_len: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    cos, sin = np.cos(ang), np.sin(ang)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _activation(x: Tensor, kind: str) -> Tensor:
    return tc.silu(x) if kind == "silu" else tc.gelu(x)


def attention_update(x: Tensor, layer: LayerParams, config: ModelConfig, causal: bool = True) -> Tensor:
    b, t, d = x.shape
    h, hd = config.n_heads, config.head_dim
    xn = tc.rms_norm(x, layer.attn_norm, config.norm_eps)
    cos, sin = rope_tables(t, hd, config.rope_base)

    def heads(w: Tensor) -> Tensor:
        return tc.transpose(tc.reshape(tc.matmul(xn, w), (b, t, h, hd)), (0, 2, 1, 3))

    q = tc.rope(heads(layer.wq), cos, sin)
    k = tc.rope(heads(layer.wk), cos, sin)
    v = heads(layer.wv)
    scores = tc.scale(tc.matmul(q, tc.swap_last(k)), hd**-0.5)
    att = tc.softmax_rows(scores, causal=causal)
    ctx = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    return tc.matmul(ctx, layer.wo)


def mlp_update(x: Tensor, layer: LayerParams, config: ModelConfig) -> Tensor:
    xn = tc.rms_norm(x, layer.mlp_norm, config.norm_eps)
    return tc.matmul(_activation(tc.matmul(xn, layer.w1), config.activation), layer.w2)


def layer_update(x: Tensor, layer: LayerParams, config: ModelConfig, causal: bool = True) -> tuple[Tensor, Tensor]:
    """Return ``(x + f(x), f(x))`` for one residual block."""
    if x.ndim != 3 or x.shape[-1] != config.d_model:
        raise DimensionError(f"layer input must be (batch, seq, {config.d_model}), got {x.shape}")
    if x.shape[1] > config.max_seq_len:
        raise DimensionError(f"sequence length {x.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    a = attention_update(x, layer, config, causal)
    mid = tc.add(x, a)
    m = mlp_update(mid, layer, config)
    return tc.add(mid, m), tc.add(a, m)


def layer_apply(x: Tensor, layer: LayerParams, config: ModelConfig, causal: bool = True) -> Tensor:
    """One residual update ``x + f(x, theta)``."""
    if x.ndim != 3 or x.shape[-1] != config.d_model:
        raise DimensionError(f"layer input must be (batch, seq, {config.d_model}), got {x.shape}")
    if x.shape[1] > config.max_seq_len:
        raise DimensionError(f"sequence length {x.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    mid = tc.add(x, attention_update(x, layer, config, causal))
    return tc.add(mid, mlp_update(mid, layer, config))


def check_tokens(tokens, params: ModelParams) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (batch, seq), got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integer ids")
    v = params.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
        raise ValueError(f"token id out of range [0, {v})")
    if tokens.shape[1] > params.config.max_seq_len:
        raise DimensionError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {params.config.max_seq_len}")
    return tokens


def embed(tokens, params: ModelParams) -> Tensor:
    return tc.embedding(params.embed, check_tokens(tokens, params))


def head(x: Tensor, params: ModelParams) -> Tensor:
    return tc.matmul(tc.rms_norm(x, params.final_norm, params.config.norm_eps), params.unembed)


def run_layers(x: Tensor, params: ModelParams, order) -> Tensor:
    cfg = params.config
    for i in order:
        x = layer_apply(x, params.layers[i], cfg)
    return x


def forward_plain(tokens, params: ModelParams) -> Tensor:
    """embed -> layers 0..L-1 -> final norm -> unembed."""
    x = embed(tokens, params)
    return head(run_layers(x, params, range(params.config.n_layers)), params)


def capture_residuals(tokens, params: ModelParams) -> list[np.ndarray]:
    """Residual stream at the input of every layer plus the final output: x^0 .. x^L."""
    x = embed(tokens, params)
    out = [x.data]
    for layer in params.layers:
        x = layer_apply(x, layer, params.config)
        out.append(x.data)
    return out


def forward_from(x: np.ndarray | Tensor, start: int, params: ModelParams) -> Tensor:
    """Resume a plain forward pass from the captured input to layer ``start``."""
    if not isinstance(x, Tensor):
        x = Tensor(x, _trusted=True)
    return head(run_layers(x, params, range(start, params.config.n_layers)), params)
