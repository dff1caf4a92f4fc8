"""Transformer encoder, speech-inversion head, TV-query cross-attention fusion
and CTC head.

Two variants share the encoder: ``baseline`` maps encoder embeddings straight
to CTC logits; ``proposed`` predicts tract variables from the embeddings,
uses them as attention queries over the embeddings, and feeds the fused
stream to the CTC head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

N_TVS = 9
VARIANTS = ("baseline", "proposed")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    feature_dim: int = 20
    n_tvs: int = N_TVS
    variant: str = "proposed"
    max_len: int = 512
    seed: int = 0
    dropout: float = 0.2  # residual dropout, active only when forward gets an rng

    def validate(self) -> None:
        for field in ("d_model", "n_layers", "n_heads", "d_ff", "feature_dim", "max_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"ModelConfig.{field} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("ModelConfig.d_model must be divisible by n_heads")
        if self.n_tvs != N_TVS:
            raise ValueError(f"ModelConfig.n_tvs must be {N_TVS}")
        if self.vocab_size < 2:
            raise ValueError("ModelConfig.vocab_size must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"ModelConfig.variant must be one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("ModelConfig.dropout must be in [0, 1)")

    @property
    def blank(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, Tensor]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int | None = None) -> Params:
    """Xavier-uniform weights, zero biases, unit layer-norm gains, s = 0."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, F = config.d_model, config.feature_dim
    arrays: dict[str, np.ndarray] = {}

    def affine(prefix, fan_in, fan_out):
        arrays[f"{prefix}.w"] = _xavier(rng, fan_in, fan_out)
        arrays[f"{prefix}.b"] = np.zeros(fan_out)

    def norm(prefix):
        arrays[f"{prefix}.g"] = np.ones(d)
        arrays[f"{prefix}.b"] = np.zeros(d)

    def attention(prefix, q_in):
        affine(f"{prefix}.q", q_in, d)
        for part in ("k", "v", "o"):
            affine(f"{prefix}.{part}", d, d)

    def ffn(prefix):
        affine(f"{prefix}.fc1", d, config.d_ff)
        affine(f"{prefix}.fc2", config.d_ff, d)

    affine("encoder.in_proj", F, d)
    for i in range(config.n_layers):
        p = f"encoder.layer{i}"
        norm(f"{p}.ln1")
        attention(f"{p}.attn", d)
        norm(f"{p}.ln2")
        ffn(f"{p}.ffn")
    norm("encoder.ln_out")

    if config.variant == "proposed":
        affine("si_head", d, N_TVS)
        norm("fusion.ln1")
        attention("fusion.attn", N_TVS)
        norm("fusion.ln2")
        ffn("fusion.ffn")
        arrays["s_ctc"] = np.zeros(())
        arrays["s_mae"] = np.zeros(())

    affine("ctc_head", d, config.vocab_size + 1)
    return {name: dc.parameter(a, name=name) for name, a in arrays.items()}


def is_proposed(params: Params) -> bool:
    return "si_head.w" in params


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def _as_batch(features, mask):
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    return x, mask, single


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return dc.transpose(dc.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def attention_weights(q: Tensor, k: Tensor, key_mask: np.ndarray) -> Tensor:
    """Scaled dot-product weights ``[B, H, Tq, Tk]``; masked keys get zero weight."""
    dh = q.shape[-1]
    logits = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(dh))
    return dc.softmax_lastaxis(logits, key_mask[:, None, None, :])


def multi_head_attention(params: Params, prefix: str, query_src: Tensor, kv_src: Tensor,
                         key_mask: np.ndarray, n_heads: int, query_pos: np.ndarray | None = None) -> Tensor:
    q = dc.linear(query_src, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    if query_pos is not None:
        q = dc.add(q, dc.constant(query_pos))
    q = _heads(q, n_heads)
    k = _heads(dc.linear(kv_src, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]), n_heads)
    v = _heads(dc.linear(kv_src, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]), n_heads)
    ctx = _merge(dc.matmul(attention_weights(q, k, key_mask), v))
    return dc.linear(ctx, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def _ln(params: Params, prefix: str, x: Tensor) -> Tensor:
    return dc.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return dc.mul(x, dc.constant(keep))


def _ffn(params: Params, prefix: str, x: Tensor) -> Tensor:
    h = dc.gelu(dc.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return dc.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def encode(params: Params, config: ModelConfig, features, mask=None,
           rng: np.random.Generator | None = None) -> Tensor:
    """Embeddings ``[B, T, d_model]`` (or ``[T, d_model]`` for a single utterance).

    Passing ``rng`` switches on residual dropout (training mode).
    """
    x, mask, single = _as_batch(features, mask)
    B, T, F = x.shape
    if T > config.max_len:
        raise ValueError(f"sequence of {T} frames exceeds max_len={config.max_len}")
    if F != config.feature_dim:
        raise ValueError(f"expected {config.feature_dim} feature dims, got {F}")
    pos = dc.constant(sinusoidal_positions(T, config.d_model))
    h = dc.add(dc.linear(dc.constant(x), params["encoder.in_proj.w"], params["encoder.in_proj.b"]), pos)
    for i in range(config.n_layers):
        p = f"encoder.layer{i}"
        a = _ln(params, f"{p}.ln1", h)
        h = dc.add(h, _dropout(multi_head_attention(params, f"{p}.attn", a, a, mask, config.n_heads),
                               config.dropout, rng))
        h = dc.add(h, _dropout(_ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", h)), config.dropout, rng))
    h = _ln(params, "encoder.ln_out", h)
    return dc.reshape(h, h.shape[1:]) if single else h


def si_head(params: Params, embeddings: Tensor) -> Tensor:
    """One affine map from embeddings to the nine tract variables."""
    return dc.linear(embeddings, params["si_head.w"], params["si_head.b"])


def fusion_block(params: Params, config: ModelConfig, tv_pred: Tensor, embeddings: Tensor,
                 mask=None, rng: np.random.Generator | None = None) -> Tensor:
    """Cross-attention with TV-derived queries over the acoustic embeddings.

    The residual stream is the acoustic embedding; the TVs enter only through
    the queries.
    """
    if tv_pred.shape[-2] != embeddings.shape[-2]:
        raise ValueError(f"TV/embedding length mismatch: {tv_pred.shape[-2]} vs {embeddings.shape[-2]}")
    single = embeddings.ndim == 2
    if single:
        tv_pred = dc.reshape(tv_pred, (1,) + tv_pred.shape)
        embeddings = dc.reshape(embeddings, (1,) + embeddings.shape)
    B, T, d = embeddings.shape
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)

    kv = _ln(params, "fusion.ln1", embeddings)
    # queries: 9 -> d projection of the TVs plus their own positional table
    attn = multi_head_attention(params, "fusion.attn", tv_pred, kv, mask, config.n_heads,
                                query_pos=sinusoidal_positions(T, d))
    h = dc.add(embeddings, _dropout(attn, config.dropout, rng))
    h = dc.add(h, _dropout(_ffn(params, "fusion.ffn", _ln(params, "fusion.ln2", h)), config.dropout, rng))
    return dc.reshape(h, h.shape[1:]) if single else h


def ctc_head(params: Params, fused: Tensor) -> Tensor:
    """Frame log-probabilities over graphemes plus blank (last index)."""
    return dc.log_softmax_lastaxis(dc.linear(fused, params["ctc_head.w"], params["ctc_head.b"]))


def forward(params: Params, config: ModelConfig, features, mask=None,
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor | None]:
    """Run the full network; returns (log_probs, tv_pred or None).

    ``rng`` is only given during training; evaluation is deterministic.
    """
    if is_proposed(params) != (config.variant == "proposed"):
        raise ValueError(f"parameters do not match variant {config.variant!r}")
    emb = encode(params, config, features, mask, rng)
    if config.variant == "baseline":
        return ctc_head(params, emb), None
    tv_pred = si_head(params, emb)
    fused = fusion_block(params, config, tv_pred, emb, mask, rng)
    return ctc_head(params, fused), tv_pred


def param_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {k: dc.parameter(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()}
