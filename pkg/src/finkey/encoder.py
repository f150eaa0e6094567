"""Small bidirectional transformer encoder with hand-written backprop.

The encoder is trained from scratch: token embeddings plus fixed sinusoidal
position encodings, then post-norm transformer layers (multi-head
self-attention with additive -inf masking of padded keys, residual,
layer norm, position-wise GELU feed-forward, residual, layer norm).  The
sentence vector is the hidden state at the leading [CLS] position.

Everything is plain numpy.  float32 is the training default; configs can be
switched to float64 for finite-difference gradient verification.  Inference
(training=False) is a pure function of (params, sequence); dropout only
fires in training mode and draws from an explicit Generator.

``forward_batch``/``backward_batch`` operate on (batch, seq) id/mask arrays
and are what the training loops use; ``forward``/``backward`` wrap them for
a single TokenSequence.

A frozen bag-of-features encoder (``bow_encode``) is also provided as the
untrained counterpart for baseline classifiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf

from .tokenizer import TokenSequence

_LN_EPS = 1e-5
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 128
    dropout_rate: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the four reserved ids")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "dropout_rate": self.dropout_rate,
            "dtype": self.dtype,
        }


@dataclass
class LayerParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class EncoderParams:
    """All trainable tensors of the encoder."""

    embedding: np.ndarray
    layers: list[LayerParams] = field(default_factory=list)

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        """Deterministically ordered (name, array) pairs over all tensors."""
        yield "embedding", self.embedding
        for i, lp in enumerate(self.layers):
            for name in (
                "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
            ):
                yield f"layers.{i}.{name}", getattr(lp, name)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            embedding=self.embedding.copy(),
            layers=[
                LayerParams(**{k: getattr(lp, k).copy() for k in lp.__dataclass_fields__})
                for lp in self.layers
            ],
        )

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(
            embedding=np.zeros_like(self.embedding),
            layers=[
                LayerParams(**{k: np.zeros_like(getattr(lp, k)) for k in lp.__dataclass_fields__})
                for lp in self.layers
            ],
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(arr).all() for _, arr in self.named())


@dataclass(frozen=True)
class PooledOutput:
    """Sentence vector ([CLS] hidden state) plus all per-token vectors."""

    sentence_vec: np.ndarray
    token_vecs: np.ndarray


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seed-deterministic initialization.

    Weight matrices are uniform in +-sqrt(6 / (fan_in + fan_out)); biases
    start at zero, layer-norm scales at one.
    """
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, f = config.d_model, config.d_ff
    embedding = _xavier(rng, config.vocab_size, d, dt)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                wq=_xavier(rng, d, d, dt), bq=np.zeros(d, dt),
                wk=_xavier(rng, d, d, dt), bk=np.zeros(d, dt),
                wv=_xavier(rng, d, d, dt), bv=np.zeros(d, dt),
                wo=_xavier(rng, d, d, dt), bo=np.zeros(d, dt),
                w1=_xavier(rng, d, f, dt), b1=np.zeros(f, dt),
                w2=_xavier(rng, f, d, dt), b2=np.zeros(d, dt),
                ln1_g=np.ones(d, dt), ln1_b=np.zeros(d, dt),
                ln2_g=np.ones(d, dt), ln2_b=np.zeros(d, dt),
            )
        )
    return EncoderParams(embedding=embedding, layers=layers)


@lru_cache(maxsize=8)
def _sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def sinusoidal_positions(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position encodings, shape (max_len, d_model)."""
    return _sinusoidal_table(max_len, d_model).astype(dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)

def _layer_norm_backward(dy: np.ndarray, g: np.ndarray, aux):
    xhat, inv = aux
    d_g = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    d_b = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, d_g, d_b


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / dtype(1.0 - rate)


def forward_batch(
    params: EncoderParams,
    config: EncoderConfig,
    ids: np.ndarray,
    attn_mask: np.ndarray,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    cache: Optional[dict] = None,
) -> np.ndarray:
    """Run the encoder over (batch, seq_len) id/mask arrays.

    Returns the final hidden states, shape (batch, seq_len, d_model).  When
    ``cache`` is a dict, the intermediates needed by backward_batch (and the
    per-layer attention probabilities) are recorded into it.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != config.max_len:
        raise ValueError(f"ids must have shape (batch, {config.max_len})")
    if ids.max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of range for vocab_size")
    dt = config.np_dtype
    key_real = np.asarray(attn_mask, dtype=bool)
    if key_real.shape != ids.shape:
        raise ValueError("attn_mask shape must match ids")

    use_dropout = training and config.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")

    x = params.embedding[ids].astype(dt, copy=True)
    x += sinusoidal_positions(config.max_len, config.d_model, dt)[None, :, :]

    if cache is not None:
        cache["ids"] = ids
        cache["key_real"] = key_real
        cache["x0"] = x
        cache["layers"] = []

    scale = 1.0 / math.sqrt(config.d_head)
    for lp in params.layers:
        q = x @ lp.wq + lp.bq
        k = x @ lp.wk + lp.bk
        v = x @ lp.wv + lp.bv
        qh = _split_heads(q, config.n_heads)
        kh = _split_heads(k, config.n_heads)
        vh = _split_heads(v, config.n_heads)
        scores = (qh @ kh.swapaxes(-1, -2)) * scale
        scores = np.where(key_real[:, None, None, :], scores, dt(-np.inf))
        probs = _softmax_last(scores)
        ctx = _merge_heads(probs @ vh)
        attn = ctx @ lp.wo + lp.bo
        drop1 = None
        if use_dropout:
            drop1 = _dropout_mask(attn.shape, config.dropout_rate, rng, dt)
            attn = attn * drop1
        h1, ln1_aux = _layer_norm(x + attn, lp.ln1_g, lp.ln1_b)
        ff_pre = h1 @ lp.w1 + lp.b1
        act = gelu(ff_pre)
        ff = act @ lp.w2 + lp.b2
        drop2 = None
        if use_dropout:
            drop2 = _dropout_mask(ff.shape, config.dropout_rate, rng, dt)
            ff = ff * drop2
        h2, ln2_aux = _layer_norm(h1 + ff, lp.ln2_g, lp.ln2_b)
        if cache is not None:
            cache["layers"].append(
                {
                    "x_in": x, "qh": qh, "kh": kh, "vh": vh, "probs": probs,
                    "ctx": ctx, "drop1": drop1, "h1": h1, "ln1_aux": ln1_aux,
                    "ff_pre": ff_pre, "act": act, "drop2": drop2,
                    "ln2_aux": ln2_aux,
                }
            )
        x = h2
    if cache is not None:
        cache["hidden"] = x
    return x


def backward_batch(
    params: EncoderParams,
    config: EncoderConfig,
    cache: dict,
    d_hidden: np.ndarray,
) -> EncoderParams:
    """Exact reverse-mode gradients for a recorded forward_batch pass.

    ``d_hidden`` is the upstream gradient on the final hidden states; the
    return value mirrors the EncoderParams structure.
    """
    grads = params.zeros_like()
    scale = 1.0 / math.sqrt(config.d_head)
    dx = np.asarray(d_hidden, dtype=config.np_dtype)

    for li in range(config.n_layers - 1, -1, -1):
        lp = params.layers[li]
        gl = grads.layers[li]
        c = cache["layers"][li]

        d_sum2, d_g, d_b = _layer_norm_backward(dx, lp.ln2_g, c["ln2_aux"])
        gl.ln2_g += d_g
        gl.ln2_b += d_b
        d_h1 = d_sum2.copy()
        d_ff = d_sum2 if c["drop2"] is None else d_sum2 * c["drop2"]

        gl.w2 += np.einsum("btf,btd->fd", c["act"], d_ff)
        gl.b2 += d_ff.sum(axis=(0, 1))
        d_act = d_ff @ lp.w2.T
        d_ff_pre = d_act * gelu_grad(c["ff_pre"])
        gl.w1 += np.einsum("btd,btf->df", c["h1"], d_ff_pre)
        gl.b1 += d_ff_pre.sum(axis=(0, 1))
        d_h1 += d_ff_pre @ lp.w1.T

        d_sum1, d_g, d_b = _layer_norm_backward(d_h1, lp.ln1_g, c["ln1_aux"])
        gl.ln1_g += d_g
        gl.ln1_b += d_b
        dx_layer = d_sum1.copy()
        d_attn = d_sum1 if c["drop1"] is None else d_sum1 * c["drop1"]

        gl.wo += np.einsum("btd,bte->de", c["ctx"], d_attn)
        gl.bo += d_attn.sum(axis=(0, 1))
        d_ctx = _split_heads(d_attn @ lp.wo.T, config.n_heads)

        probs, qh, kh, vh = c["probs"], c["qh"], c["kh"], c["vh"]
        d_probs = d_ctx @ vh.swapaxes(-1, -2)
        d_vh = probs.swapaxes(-1, -2) @ d_ctx
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_qh = (d_scores @ kh) * scale
        d_kh = (d_scores.swapaxes(-1, -2) @ qh) * scale

        x_in = c["x_in"]
        d_q = _merge_heads(d_qh)
        d_k = _merge_heads(d_kh)
        d_v = _merge_heads(d_vh)
        gl.wq += np.einsum("btd,bte->de", x_in, d_q)
        gl.bq += d_q.sum(axis=(0, 1))
        gl.wk += np.einsum("btd,bte->de", x_in, d_k)
        gl.bk += d_k.sum(axis=(0, 1))
        gl.wv += np.einsum("btd,bte->de", x_in, d_v)
        gl.bv += d_v.sum(axis=(0, 1))
        dx_layer += d_q @ lp.wq.T + d_k @ lp.wk.T + d_v @ lp.wv.T
        dx = dx_layer

    np.add.at(
        grads.embedding,
        cache["ids"].reshape(-1),
        dx.reshape(-1, config.d_model).astype(grads.embedding.dtype),
    )
    return grads


def _seq_arrays(seq: TokenSequence):
    ids = np.asarray(seq.ids, dtype=np.int64)[None, :]
    mask = np.asarray(seq.attention_mask, dtype=np.int64)[None, :]
    return ids, mask


def forward(
    params: EncoderParams,
    config: EncoderConfig,
    seq: TokenSequence,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> PooledOutput:
    """Encode one TokenSequence; the sentence vector is the [CLS] row."""
    ids, mask = _seq_arrays(seq)
    hidden = forward_batch(params, config, ids, mask, training=training, rng=rng)
    return PooledOutput(sentence_vec=hidden[0, 0], token_vecs=hidden[0])


def forward_cached(
    params: EncoderParams,
    config: EncoderConfig,
    seq: TokenSequence,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[PooledOutput, dict]:
    """Like forward, but also returns the activation cache for backward()."""
    cache: dict = {}
    hidden = forward_batch(
        params, config, *_seq_arrays(seq), training=training, rng=rng, cache=cache
    )
    return PooledOutput(sentence_vec=hidden[0, 0], token_vecs=hidden[0]), cache


def backward(
    params: EncoderParams,
    config: EncoderConfig,
    cache: dict,
    d_token_vecs: Optional[np.ndarray] = None,
    d_sentence_vec: Optional[np.ndarray] = None,
) -> EncoderParams:
    """Parameter gradients for a single recorded sequence.

    The upstream gradient may target the per-token vectors, the sentence
    vector (added at the [CLS] row), or both.
    """
    d_hidden = np.zeros((1, config.max_len, config.d_model), dtype=config.np_dtype)
    if d_token_vecs is not None:
        d_hidden[0] += d_token_vecs
    if d_sentence_vec is not None:
        d_hidden[0, 0] += d_sentence_vec
    return backward_batch(params, config, cache, d_hidden)


def bow_encode(seq: TokenSequence, vocab_size: int) -> np.ndarray:
    """L2-normalized term-frequency vector over the real non-special tokens.

    Special and padding positions (those without a character offset) are
    ignored; a sequence with no real tokens maps to the zero vector.
    """
    vec = np.zeros(vocab_size, dtype=np.float64)
    for tok_id, offset in zip(seq.ids, seq.offsets):
        if offset is not None:
            vec[tok_id] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec
