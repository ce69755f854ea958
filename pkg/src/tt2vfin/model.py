"""Time2Vec + transformer-encoder regressor and its ablation variants.

Input windows are ``[batch, W]`` slices of the aggregate normalised series.
Each step's value is concatenated with a Time2Vec embedding of its relative
position, projected to ``d_model``, optionally offset by sinusoidal positional
encoding, passed through ``n_layers`` post-norm encoder blocks, pooled over
time and mapped to a scalar next-step prediction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import numerics as nx
from .errors import DimensionError, UsageError
from .numerics import Tensor

ParameterSet = dict  # name -> Tensor, in a fixed order

MASK_VALUE = -1e30

# A full-width head starts with predictions spread as wide as the [0, 1]
# targets; the first Adam steps then overshoot. A narrow head keeps early
# descent monotone.
HEAD_INIT_SCALE = 0.1

VARIANTS = {
    # name: (use_time2vec, use_positional_encoding, use_causal_mask)
    "base": (True, False, False),
    "p": (True, True, False),
    "m": (True, False, True),
    "pm": (True, True, True),
    "transformer-p": (False, True, False),
}


@dataclass(frozen=True)
class ModelConfig:
    k: int = 15
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 144
    dropout_p: float = 0.1
    pooling: str = "mean"
    window: int = 32
    use_time2vec: bool = True
    use_positional_encoding: bool = False
    use_causal_mask: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if self.n_layers < 1:
            raise UsageError("n_layers must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise UsageError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < 1 or self.window < 1:
            raise UsageError("d_ff and window must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise UsageError("dropout_p must lie in [0, 1)")
        if self.pooling not in ("mean", "max"):
            raise UsageError("pooling must be 'mean' or 'max'")
        if self.use_positional_encoding and self.d_model % 2:
            raise UsageError("positional encoding needs an even d_model")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def input_dim(self) -> int:
        return 1 + (self.k + 1 if self.use_time2vec else 0)

    @property
    def variant(self) -> str | None:
        flags = (self.use_time2vec, self.use_positional_encoding, self.use_causal_mask)
        for name, f in VARIANTS.items():
            if f == flags:
                return name
        return None

    def with_variant(self, name: str) -> "ModelConfig":
        try:
            t2v, pe, mask = VARIANTS[name]
        except KeyError:
            raise UsageError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return replace(self, use_time2vec=t2v, use_positional_encoding=pe, use_causal_mask=mask)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# parameters

def _block_shapes(cfg: ModelConfig, prefix: str) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.w{p}"] = (d, d)
        shapes[f"{prefix}.attn.b{p}"] = (d,)
    shapes[f"{prefix}.ln1.gain"] = (d,)
    shapes[f"{prefix}.ln1.bias"] = (d,)
    shapes[f"{prefix}.ff1.weight"] = (d, f)
    shapes[f"{prefix}.ff1.bias"] = (f,)
    shapes[f"{prefix}.ff2.weight"] = (f, d)
    shapes[f"{prefix}.ff2.bias"] = (d,)
    shapes[f"{prefix}.ln2.gain"] = (d,)
    shapes[f"{prefix}.ln2.bias"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    if cfg.use_time2vec:
        shapes["t2v.omega"] = (cfg.k + 1,)
        shapes["t2v.phi"] = (cfg.k + 1,)
    shapes["input.weight"] = (cfg.input_dim, cfg.d_model)
    shapes["input.bias"] = (cfg.d_model,)
    for layer in range(cfg.n_layers):
        shapes.update(_block_shapes(cfg, f"enc{layer}"))
    shapes["head.weight"] = (cfg.d_model, 1)
    shapes["head.bias"] = (1,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_parameters(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Deterministic initialisation from ``seed``.

    Weight matrices are uniform on +-1/sqrt(fan_in), the regression head on a
    bound ``HEAD_INIT_SCALE`` times smaller; biases and layer-norm offsets are 0,
    layer-norm gains 1. Time2Vec frequencies are uniform on
    [0.02, 1] with a random sign, phases uniform on [0, 2*pi).
    """
    rng = nx.make_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name == "t2v.omega":
            mag = rng.uniform(0.02, 1.0, size=shape)
            arr = mag * rng.choice([-1.0, 1.0], size=shape)
        elif name == "t2v.phi":
            arr = rng.uniform(0.0, 2 * np.pi, size=shape)
        elif leaf == "gain":
            arr = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            if name == "head.weight":
                bound *= HEAD_INIT_SCALE
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def check_parameters(params: ParameterSet, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise UsageError(f"parameters do not match config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise UsageError(f"{name}: shape {params[name].shape}, config expects {shape}")


def copy_parameters(params: ParameterSet) -> ParameterSet:
    return {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in params.items()}


# --------------------------------------------------------------------------
# layers

def time2vec(tau, omega, phi) -> Tensor:
    """``[len(tau), k+1]``: column 0 is linear in tau, the rest are sines."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    lin = nx.add(nx.mul(Tensor(tau), omega), phi)
    return nx.concatenate([lin[:, :1], nx.sin(lin[:, 1:])], axis=-1)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise UsageError("positional encoding needs an even d_model")
    pos = np.arange(length, dtype=np.float64)[:, None]
    j = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, j / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: row t may attend to columns <= t."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def scaled_dot_product_attention(q, k, v, mask=None) -> Tensor:
    """``softmax(q k^T / sqrt(d) + mask) v`` over the last two axes."""
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} do not agree")
    nd = k.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, perm)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = nx.add(scores, mask)
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def multi_head_attention(x, params: ParameterSet, prefix: str, n_heads: int, mask=None) -> Tensor:
    b, w, d = x.shape
    dh = d // n_heads

    def heads(name):
        t = nx.dense(x, params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"])
        return nx.transpose(nx.reshape(t, (b, w, n_heads, dh)), (0, 2, 1, 3))

    att = scaled_dot_product_attention(heads("q"), heads("k"), heads("v"), mask)
    merged = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, w, d))
    return nx.dense(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def encoder_block(x, params: ParameterSet, prefix: str, cfg: ModelConfig,
                  training: bool = False, rng=None, mask=None) -> Tensor:
    """Post-norm block: LN(x + Drop(MHA(x))) then LN(h + Drop(FF(h)))."""
    a = multi_head_attention(x, params, f"{prefix}.attn", cfg.n_heads, mask)
    a = nx.dropout(a, cfg.dropout_p, rng, training)
    h = nx.layer_norm(nx.add(x, a), params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"],
                      cfg.ln_eps)
    f = nx.relu(nx.dense(h, params[f"{prefix}.ff1.weight"], params[f"{prefix}.ff1.bias"]))
    f = nx.dense(f, params[f"{prefix}.ff2.weight"], params[f"{prefix}.ff2.bias"])
    f = nx.dropout(f, cfg.dropout_p, rng, training)
    return nx.layer_norm(nx.add(h, f), params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"],
                         cfg.ln_eps)


def _as_windows(windows, cfg: ModelConfig) -> np.ndarray:
    arr = np.asarray(windows.data if isinstance(windows, Tensor) else windows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != cfg.window:
        raise UsageError(f"windows must be [batch, {cfg.window}], got {arr.shape}")
    return arr


def embed(windows, params: ParameterSet, cfg: ModelConfig) -> Tensor:
    """Per-step input projection (plus encodings) -> ``[batch, W, d_model]``."""
    arr = _as_windows(windows, cfg)
    b, w = arr.shape
    inp = Tensor(arr[:, :, None])
    if isinstance(windows, Tensor):
        inp = nx.reshape(windows, (b, w, 1))
    if cfg.use_time2vec:
        te = time2vec(np.arange(w), params["t2v.omega"], params["t2v.phi"])
        inp = nx.concatenate([inp, nx.broadcast_to(te, (b, w, cfg.k + 1))], axis=-1)
    h = nx.dense(inp, params["input.weight"], params["input.bias"])
    if cfg.use_positional_encoding:
        h = nx.add(h, positional_encoding(w, cfg.d_model))
    return h


def encode(windows, params: ParameterSet, cfg: ModelConfig, training: bool = False,
           rng=None) -> Tensor:
    """Encoder-stack output per position, ``[batch, W, d_model]``."""
    check_parameters(params, cfg)
    h = embed(windows, params, cfg)
    mask = causal_mask(h.shape[1]) if cfg.use_causal_mask else None
    for layer in range(cfg.n_layers):
        h = encoder_block(h, params, f"enc{layer}", cfg, training, rng, mask)
    return h


def forward(windows, params: ParameterSet, cfg: ModelConfig, training: bool = False,
            rng=None) -> Tensor:
    """Scalar next-step prediction per window, shape ``[batch]``."""
    h = encode(windows, params, cfg, training, rng)
    pooled = nx.mean(h, axis=1) if cfg.pooling == "mean" else nx.max_(h, axis=1)
    pooled = nx.dropout(pooled, cfg.dropout_p, rng, training)
    out = nx.dense(pooled, params["head.weight"], params["head.bias"])
    return nx.reshape(out, (out.shape[0],))


def predict(windows, params: ParameterSet, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions as a plain array, evaluated in fixed-size chunks."""
    arr = _as_windows(windows, cfg)
    out = np.empty(arr.shape[0])
    for s in range(0, arr.shape[0], batch_size):
        out[s:s + batch_size] = forward(arr[s:s + batch_size], params, cfg).data
    return out
