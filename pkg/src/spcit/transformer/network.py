"""Causal decoder network for conditional quantile regression, in plain numpy.

Pre-norm decoder blocks (self-attention + GELU feed-forward, residual
connections, dropout after each sublane output), a fixed sinusoidal position
table, linear input/output projections, and a final layer norm. Every layer
caches its forward intermediates and implements an exact reverse-mode
backward; there is no autograd framework underneath.

Determinism: parameter init consumes one SplitMix64 stream in a fixed order
(input projection, then per layer Wq, Wk, Wv, Wo, W1, W2, then the output
projection; biases and norm parameters are zero/one and draw nothing).
Dropout masks consume the stream passed to ``forward`` layer by layer
(attention mask first, then feed-forward mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import DataValidationError, NumericError, QuantileGrid, StructuralError, rearrange_monotone
from ..rng import Stream, derive_seed


@dataclass(frozen=True)
class DecoderConfig:
    window_w: int
    input_dim: int
    quantile_levels: tuple[float, ...]
    d_model: int = 16
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int | None = None  # None -> 4 * d_model
    dropout: float = 0.2
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    # stop after this many epochs without validation improvement (None = run
    # all max_epochs); the best-validation snapshot is returned either way
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DataValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.window_w < 1 or self.input_dim < 1 or self.n_layers < 1:
            raise DataValidationError("window_w, input_dim and n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise DataValidationError("dropout must lie in [0, 1)")
        lv = np.asarray(self.quantile_levels, dtype=np.float64)
        if lv.ndim != 1 or len(lv) == 0 or np.any(lv < 0) or np.any(lv > 1) or np.any(np.diff(lv) <= 0):
            raise DataValidationError("quantile_levels must be strictly increasing within [0, 1]")
        object.__setattr__(self, "quantile_levels", tuple(float(p) for p in lv))

    @property
    def ff_dim(self) -> int:
        return 4 * self.d_model if self.d_ff is None else self.d_ff

    @property
    def n_quantiles(self) -> int:
        return len(self.quantile_levels)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def _glorot(stream: Stream, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * stream.uniform(fan_in * fan_out).reshape(fan_in, fan_out) - 1.0) * a


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_with_tanh(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gelu(x), tanh term) so the backward pass can reuse the tanh."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad_from_tanh(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return _gelu_grad_from_tanh(x, np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


class LayerNorm:
    EPS = 1e-5

    def __init__(self, dim: int, prefix: str):
        self.g = np.ones(dim)
        self.b = np.zeros(dim)
        self.dg = np.zeros(dim)
        self.db = np.zeros(dim)
        self.prefix = prefix
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.g + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.dg += (dy * xhat).sum(axis=axes)
        self.db += dy.sum(axis=axes)
        ghat = dy * self.g
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        return (ghat - m1 - xhat * m2) * inv

    def params(self):
        return {f"{self.prefix}.g": self.g, f"{self.prefix}.b": self.b}

    def grads(self):
        return {f"{self.prefix}.g": self.dg, f"{self.prefix}.b": self.db}


class CausalSelfAttention:
    def __init__(self, cfg: DecoderConfig, stream: Stream, prefix: str):
        D = cfg.d_model
        self.h = cfg.n_heads
        self.dh = D // cfg.n_heads
        self.Wq = _glorot(stream, D, D)
        self.Wk = _glorot(stream, D, D)
        self.Wv = _glorot(stream, D, D)
        self.Wo = _glorot(stream, D, D)
        self.bq = np.zeros(D)
        self.bk = np.zeros(D)
        self.bv = np.zeros(D)
        self.bo = np.zeros(D)
        self.prefix = prefix
        self.zero_grads()
        self._cache = None

    def zero_grads(self):
        self.dWq = np.zeros_like(self.Wq)
        self.dWk = np.zeros_like(self.Wk)
        self.dWv = np.zeros_like(self.Wv)
        self.dWo = np.zeros_like(self.Wo)
        self.dbq = np.zeros_like(self.bq)
        self.dbk = np.zeros_like(self.bk)
        self.dbv = np.zeros_like(self.bv)
        self.dbo = np.zeros_like(self.bo)

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, T, D = x.shape
        return x.reshape(B, T, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, h, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)

    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        q = self._split(x @ self.Wq + self.bq)
        k = self._split(x @ self.Wk + self.bk)
        v = self._split(x @ self.Wv + self.bv)
        scale = 1.0 / math.sqrt(self.dh)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        o = p @ v
        merged = self._merge(o)
        self._cache = (x, q, k, v, p, merged, scale)
        return merged @ self.Wo + self.bo

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, q, k, v, p, merged, scale = self._cache
        B, T, D = x.shape
        flat = lambda a: a.reshape(-1, a.shape[-1])
        self.dWo += flat(merged).T @ flat(dy)
        self.dbo += flat(dy).sum(axis=0)
        dmerged = dy @ self.Wo.T
        do = self._split(dmerged)
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale
        dq_lin = self._merge(dq)
        dk_lin = self._merge(dk)
        dv_lin = self._merge(dv)
        xf = flat(x)
        self.dWq += xf.T @ flat(dq_lin)
        self.dWk += xf.T @ flat(dk_lin)
        self.dWv += xf.T @ flat(dv_lin)
        self.dbq += flat(dq_lin).sum(axis=0)
        self.dbk += flat(dk_lin).sum(axis=0)
        self.dbv += flat(dv_lin).sum(axis=0)
        return dq_lin @ self.Wq.T + dk_lin @ self.Wk.T + dv_lin @ self.Wv.T

    def params(self):
        p = self.prefix
        return {
            f"{p}.Wq": self.Wq, f"{p}.Wk": self.Wk, f"{p}.Wv": self.Wv, f"{p}.Wo": self.Wo,
            f"{p}.bq": self.bq, f"{p}.bk": self.bk, f"{p}.bv": self.bv, f"{p}.bo": self.bo,
        }

    def grads(self):
        p = self.prefix
        return {
            f"{p}.Wq": self.dWq, f"{p}.Wk": self.dWk, f"{p}.Wv": self.dWv, f"{p}.Wo": self.dWo,
            f"{p}.bq": self.dbq, f"{p}.bk": self.dbk, f"{p}.bv": self.dbv, f"{p}.bo": self.dbo,
        }


class FeedForward:
    def __init__(self, cfg: DecoderConfig, stream: Stream, prefix: str):
        D, F = cfg.d_model, cfg.ff_dim
        self.W1 = _glorot(stream, D, F)
        self.b1 = np.zeros(F)
        self.W2 = _glorot(stream, F, D)
        self.b2 = np.zeros(D)
        self.prefix = prefix
        self.zero_grads()
        self._cache = None

    def zero_grads(self):
        self.dW1 = np.zeros_like(self.W1)
        self.db1 = np.zeros_like(self.b1)
        self.dW2 = np.zeros_like(self.W2)
        self.db2 = np.zeros_like(self.b2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        u = x @ self.W1 + self.b1
        h, t = _gelu_with_tanh(u)
        self._cache = (x, u, t, h)
        return h @ self.W2 + self.b2

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, u, t, h = self._cache
        flat = lambda a: a.reshape(-1, a.shape[-1])
        self.dW2 += flat(h).T @ flat(dy)
        self.db2 += flat(dy).sum(axis=0)
        dh = dy @ self.W2.T
        du = dh * _gelu_grad_from_tanh(u, t)
        self.dW1 += flat(x).T @ flat(du)
        self.db1 += flat(du).sum(axis=0)
        return du @ self.W1.T

    def params(self):
        p = self.prefix
        return {f"{p}.W1": self.W1, f"{p}.b1": self.b1, f"{p}.W2": self.W2, f"{p}.b2": self.b2}

    def grads(self):
        p = self.prefix
        return {f"{p}.W1": self.dW1, f"{p}.b1": self.db1, f"{p}.W2": self.dW2, f"{p}.b2": self.db2}


class DecoderLayer:
    def __init__(self, cfg: DecoderConfig, stream: Stream, prefix: str):
        self.ln1 = LayerNorm(cfg.d_model, f"{prefix}.ln1")
        self.attn = CausalSelfAttention(cfg, stream, f"{prefix}.attn")
        self.ln2 = LayerNorm(cfg.d_model, f"{prefix}.ln2")
        self.ffn = FeedForward(cfg, stream, f"{prefix}.ffn")
        self.rate = cfg.dropout
        self._mask1 = None
        self._mask2 = None

    def _dropout_mask(self, shape, stream: Stream) -> np.ndarray:
        keep = stream.uniform(int(np.prod(shape))).reshape(shape) >= self.rate
        return keep / (1.0 - self.rate)

    def forward(self, x: np.ndarray, mask: np.ndarray, train: bool, stream: Stream | None) -> np.ndarray:
        a = self.attn.forward(self.ln1.forward(x), mask)
        if train and self.rate > 0.0:
            self._mask1 = self._dropout_mask(a.shape, stream)
            a = a * self._mask1
        else:
            self._mask1 = None
        x = x + a
        f = self.ffn.forward(self.ln2.forward(x))
        if train and self.rate > 0.0:
            self._mask2 = self._dropout_mask(f.shape, stream)
            f = f * self._mask2
        else:
            self._mask2 = None
        return x + f

    def backward(self, dy: np.ndarray) -> np.ndarray:
        df = dy if self._mask2 is None else dy * self._mask2
        dy = dy + self.ln2.backward(self.ffn.backward(df))
        da = dy if self._mask1 is None else dy * self._mask1
        return dy + self.ln1.backward(self.attn.backward(da))

    def zero_grads(self):
        self.attn.zero_grads()
        self.ffn.zero_grads()
        for ln in (self.ln1, self.ln2):
            ln.dg[:] = 0.0
            ln.db[:] = 0.0

    def params(self):
        out = {}
        for m in (self.ln1, self.attn, self.ln2, self.ffn):
            out.update(m.params())
        return out

    def grads(self):
        out = {}
        for m in (self.ln1, self.attn, self.ln2, self.ffn):
            out.update(m.grads())
        return out


class DecoderNetwork:
    """The full quantile decoder: projections, position table, block stack."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        stream = Stream(derive_seed(cfg.seed, 0))
        self.in_W = _glorot(stream, cfg.input_dim, cfg.d_model)
        self.in_b = np.zeros(cfg.d_model)
        self.layers = [DecoderLayer(cfg, stream, f"layers.{i}") for i in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model, "final_ln")
        self.out_W = _glorot(stream, cfg.d_model, cfg.n_quantiles)
        self.out_b = np.zeros(cfg.n_quantiles)
        self.positions = sinusoidal_positions(cfg.window_w, cfg.d_model)
        self.mask = np.triu(np.full((cfg.window_w, cfg.window_w), -np.inf), k=1)
        self.zero_grads()
        self._cache = None

    # ------------------------------------------------------------ forward

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        if batch.ndim != 3 or batch.shape[1] != self.cfg.window_w or batch.shape[2] != self.cfg.input_dim:
            raise StructuralError(
                f"window batch has shape {batch.shape}, expected (B, {self.cfg.window_w}, {self.cfg.input_dim})"
            )
        return batch

    def forward_positions(self, batch: np.ndarray, train: bool = False, stream: Stream | None = None) -> np.ndarray:
        """(B, w, K) quantile outputs at every position."""
        batch = self._check_batch(batch)
        x = batch @ self.in_W + self.in_b
        x = x + self.positions
        for layer in self.layers:
            x = layer.forward(x, self.mask, train, stream)
        x = self.final_ln.forward(x)
        y = x @ self.out_W + self.out_b
        self._cache = (batch, x)
        if train and not np.all(np.isfinite(y)):
            raise NumericError("non-finite activations in forward pass")
        return y

    def forward(self, batch: np.ndarray, train: bool = False, stream: Stream | None = None) -> np.ndarray:
        """(B, K) quantile predictions for the step following each window."""
        return self.forward_positions(batch, train, stream)[:, -1, :]

    def backward_last(self, d_last: np.ndarray) -> None:
        """Reverse pass from gradients at the final position's outputs."""
        batch, x = self._cache
        B, w, K = len(batch), self.cfg.window_w, self.cfg.n_quantiles
        dy = np.zeros((B, w, K))
        dy[:, -1, :] = d_last
        flat = lambda a: a.reshape(-1, a.shape[-1])
        self.d_out_W += flat(x).T @ flat(dy)
        self.d_out_b += flat(dy).sum(axis=0)
        dx = dy @ self.out_W.T
        dx = self.final_ln.backward(dx)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        self.d_in_W += flat(batch).T @ flat(dx)
        self.d_in_b += flat(dx).sum(axis=0)

    # ---------------------------------------------------------- plumbing

    def zero_grads(self):
        self.d_in_W = np.zeros_like(self.in_W)
        self.d_in_b = np.zeros_like(self.in_b)
        self.d_out_W = np.zeros_like(self.out_W)
        self.d_out_b = np.zeros_like(self.out_b)
        for layer in self.layers:
            layer.zero_grads()
        self.final_ln.dg[:] = 0.0
        self.final_ln.db[:] = 0.0

    def params(self) -> dict[str, np.ndarray]:
        out = {"in_proj.W": self.in_W, "in_proj.b": self.in_b}
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.final_ln.params())
        out["out_proj.W"] = self.out_W
        out["out_proj.b"] = self.out_b
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {"in_proj.W": self.d_in_W, "in_proj.b": self.d_in_b}
        for layer in self.layers:
            out.update(layer.grads())
        out.update(self.final_ln.grads())
        out["out_proj.W"] = self.d_out_W
        out["out_proj.b"] = self.d_out_b
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(snap) != set(params):
            raise StructuralError("snapshot parameter names do not match the network")
        for k, v in params.items():
            v[...] = snap[k]


def predict_quantile_grid(model: DecoderNetwork, window: np.ndarray) -> QuantileGrid:
    """Eval-mode forward for one window, crossings repaired by sorting."""
    values = model.forward(window, train=False)[0]
    grid = QuantileGrid(np.array(model.cfg.quantile_levels), values)
    return rearrange_monotone(grid)
