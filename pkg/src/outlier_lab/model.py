"""Post-LN BERT-style encoder in numpy with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names.
Layers are numbered from 1; ``hs_0`` is the embedding LayerNorm output and
``hs_l`` is the output of layer ``l`` after its second (output) LayerNorm.

Storage dtype follows the parameters (float32 for training, float64 for
gradient checks).  LayerNorm moments, softmax normalisation and loss
reductions always run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import _kernels as _k
from .corpus import IGNORE, PAD

Params = dict[str, np.ndarray]

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 2005
    max_seq_len: int = 64
    n_classes: int = 2
    layernorm_epsilon: float = 1e-12
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "hidden_dim", "n_heads", "ffn_dim", "vocab_size", "max_seq_len", "n_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if not self.layernorm_epsilon > 0:
            raise ValueError("layernorm_epsilon must be > 0")
        if not self.init_std > 0:
            raise ValueError("init_std must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


@dataclass(frozen=True)
class AblationMask:
    """Dimensions whose LayerNorm weight and bias are forced to zero.

    ``layers=None`` means every layer 1..L.
    """

    dims: frozenset = frozenset()
    layers: frozenset | None = None

    def __init__(self, dims: Iterable[int] = (), layers: Iterable[int] | None = None):
        object.__setattr__(self, "dims", frozenset(int(d) for d in dims))
        object.__setattr__(self, "layers", None if layers is None else frozenset(int(l) for l in layers))

    def layer_set(self, n_layers: int) -> frozenset:
        return frozenset(range(1, n_layers + 1)) if self.layers is None else self.layers

    def check(self, cfg: ModelConfig) -> None:
        bad = [d for d in self.dims if not 0 <= d < cfg.hidden_dim]
        if bad:
            raise ValueError(f"ablation dims out of range [0, {cfg.hidden_dim}): {sorted(bad)}")
        bad = [l for l in self.layer_set(cfg.n_layers) if not 1 <= l <= cfg.n_layers]
        if bad:
            raise ValueError(f"ablation layers out of range [1, {cfg.n_layers}]: {sorted(bad)}")

    def keep(self, cfg: ModelConfig, layer: int) -> np.ndarray | None:
        if not self.dims or layer not in self.layer_set(cfg.n_layers):
            return None
        keep = np.ones(cfg.hidden_dim)
        keep[sorted(self.dims)] = 0.0
        return keep


NO_ABLATION = AblationMask()


def layer_param_names(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [p + n for n in (
        "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
        "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias",
        "attn_ln.weight", "attn_ln.bias",
        "ffn.in.weight", "ffn.in.bias", "ffn.out.weight", "ffn.out.bias",
        "out_ln.weight", "out_ln.bias",
    )]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (V, d),
        "embeddings.position": (cfg.max_seq_len, d),
        "embeddings.ln.weight": (d,),
        "embeddings.ln.bias": (d,),
    }
    for l in range(1, cfg.n_layers + 1):
        for name in layer_param_names(l):
            leaf = name.split(".", 2)[2]
            if leaf.startswith("attn.") and leaf.endswith("weight"):
                shapes[name] = (d, d)
            elif leaf.startswith("attn.") or leaf.endswith("ln.weight") or leaf.endswith("ln.bias"):
                shapes[name] = (d,)
            elif leaf == "ffn.in.weight":
                shapes[name] = (d, f)
            elif leaf == "ffn.in.bias":
                shapes[name] = (f,)
            elif leaf == "ffn.out.weight":
                shapes[name] = (f, d)
            else:
                shapes[name] = (d,)
    shapes.update({
        "mlm.dense.weight": (d, d),
        "mlm.dense.bias": (d,),
        "mlm.ln.weight": (d,),
        "mlm.ln.bias": (d,),
        "mlm.decoder.bias": (V,),
        "cls.weight": (d, cfg.n_classes),
        "cls.bias": (cfg.n_classes,),
    })
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_parameters(cfg: ModelConfig, dtype=np.float32) -> Params:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln.weight"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, cfg.init_std).astype(dtype)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- primitives ---------------------------------------------------------------

def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    return np.tanh(x * (_GELU_C + _GELU_C * 0.044715 * x2))


def gelu(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """tanh-approximate GELU; ``t`` may carry a precomputed tanh term."""
    if t is None:
        t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t)


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    x2 = x * x
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (_GELU_C + 3 * _GELU_C * 0.044715 * x2)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> np.ndarray:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` over the last axis."""
    y, _ = _ln_forward(np.asarray(x), np.asarray(gamma), np.asarray(beta), eps, None)
    return y


def _ln_forward(x, gamma, beta, eps, keep):
    dt = x.dtype
    g, b = gamma.astype(dt), beta.astype(dt)
    if keep is not None:
        # select rather than multiply: -gamma * 0 would give -0.0, not the +0.0 of zeroed parameters
        g = np.where(keep > 0, g, dt.type(0))
        b = np.where(keep > 0, b, dt.type(0))
    shape = x.shape
    y, xhat, inv = _k.layernorm_forward(np.ascontiguousarray(x).reshape(-1, shape[-1]), g, b, eps)
    return y.reshape(shape), (xhat, inv, g, keep, shape)


def _ln_backward(dy, cache):
    xhat, inv, g, keep, shape = cache
    dx, dgamma, dbeta = _k.layernorm_backward(np.ascontiguousarray(dy).reshape(xhat.shape), xhat, inv, g)
    if keep is not None:
        dgamma *= keep
        dbeta *= keep
    return dx.reshape(shape), dgamma, dbeta


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean CE and d(loss)/d(logits)."""
    logp = _log_softmax64(logits)
    n = targets.shape[0]
    loss = -logp[np.arange(n), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype)


# -- encoder ------------------------------------------------------------------

@dataclass
class LayerTrace:
    hidden_states: list[np.ndarray]
    attention_maps: list[np.ndarray]


@dataclass
class _Cache:
    ids: np.ndarray
    emb_ln: tuple
    layers: list[dict] = field(default_factory=list)


def check_ids(cfg: ModelConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise ValueError(f"expected a [batch, seq] id matrix, got shape {ids.shape}")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"token id {int(ids[r, c])} at position ({r}, {c}) is outside [0, {cfg.vocab_size})")


def encode(params: Params, cfg: ModelConfig, ids, valid=None, ablation: AblationMask | None = None,
           keep_cache: bool = False):
    """Run the encoder stack.  Returns ``(LayerTrace, cache or None)``."""
    ids = np.asarray(ids)
    check_ids(cfg, ids)
    ablation = ablation or NO_ABLATION
    ablation.check(cfg)
    valid = ids != PAD if valid is None else np.asarray(valid, dtype=bool)
    B, T = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    eps = cfg.layernorm_epsilon
    scale = 1.0 / math.sqrt(dh)
    if not valid.any(axis=1).all():
        raise ValueError("every row needs at least one non-PAD position")

    e = params["embeddings.token"][ids] + params["embeddings.position"][:T]
    h, emb_ln = _ln_forward(e, params["embeddings.ln.weight"], params["embeddings.ln.bias"], eps, None)
    cache = _Cache(ids=ids, emb_ln=emb_ln) if keep_cache else None
    hidden = [h]
    maps = []

    def heads(x):
        return x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    for l in range(1, cfg.n_layers + 1):
        p = f"layers.{l}."
        keep = ablation.keep(cfg, l)
        q = heads(h @ params[p + "attn.q.weight"] + params[p + "attn.q.bias"])
        k = heads(h @ params[p + "attn.k.weight"] + params[p + "attn.k.bias"])
        v = heads(h @ params[p + "attn.v.weight"] + params[p + "attn.v.bias"])
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        flat_scores = _k.shift_rows(scores.reshape(-1, T), valid)
        A = _k.normalize_rows(np.exp(flat_scores, out=flat_scores)).reshape(B, H, T, T)
        ctx = (A @ v).transpose(0, 2, 1, 3).reshape(B, T, -1)
        a = ctx @ params[p + "attn.o.weight"] + params[p + "attn.o.bias"]
        h1, ln1 = _ln_forward(h + a, params[p + "attn_ln.weight"], params[p + "attn_ln.bias"], eps, keep)
        u = h1 @ params[p + "ffn.in.weight"] + params[p + "ffn.in.bias"]
        tu = _gelu_tanh(u)
        g = gelu(u, tu)
        f = g @ params[p + "ffn.out.weight"] + params[p + "ffn.out.bias"]
        h2, ln2 = _ln_forward(h1 + f, params[p + "out_ln.weight"], params[p + "out_ln.bias"], eps, keep)
        if keep_cache:
            cache.layers.append(dict(h=h, q=q, k=k, v=v, A=A, ctx=ctx, ln1=ln1, h1=h1, u=u, tu=tu, g=g, ln2=ln2))
        hidden.append(h2)
        maps.append(A)
        h = h2
    return LayerTrace(hidden, maps), cache


def _encode_backward(params: Params, cfg: ModelConfig, cache: _Cache, dh_top: np.ndarray, grads: Params) -> None:
    B, T = cache.ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    dout = dh_top

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(B, T, -1)

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    for l in range(cfg.n_layers, 0, -1):
        p = f"layers.{l}."
        c = cache.layers[l - 1]
        dr2, dgam, dbet = _ln_backward(dout, c["ln2"])
        grads[p + "out_ln.weight"] += dgam
        grads[p + "out_ln.bias"] += dbet
        # FFN
        grads[p + "ffn.out.weight"] += flat(c["g"]).T @ flat(dr2)
        grads[p + "ffn.out.bias"] += dr2.sum(axis=(0, 1))
        dg = dr2 @ params[p + "ffn.out.weight"].T
        m = c["u"].shape[-1]
        du = _k.gelu_backward(dg.reshape(-1, m), c["u"].reshape(-1, m), c["tu"].reshape(-1, m)).reshape(dg.shape)
        grads[p + "ffn.in.weight"] += flat(c["h1"]).T @ flat(du)
        grads[p + "ffn.in.bias"] += du.sum(axis=(0, 1))
        dh1 = dr2 + du @ params[p + "ffn.in.weight"].T
        dr1, dgam, dbet = _ln_backward(dh1, c["ln1"])
        grads[p + "attn_ln.weight"] += dgam
        grads[p + "attn_ln.bias"] += dbet
        # attention
        grads[p + "attn.o.weight"] += flat(c["ctx"]).T @ flat(dr1)
        grads[p + "attn.o.bias"] += dr1.sum(axis=(0, 1))
        dctx = (dr1 @ params[p + "attn.o.weight"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dctx
        ds = _k.softmax_backward(A.reshape(-1, T), dA.reshape(-1, T), scale).reshape(A.shape)
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        hin = flat(c["h"])
        dhin = dr1.copy()
        for name, dx in (("q", dq), ("k", dk), ("v", dv)):
            dx = merge(dx)
            grads[p + f"attn.{name}.weight"] += hin.T @ flat(dx)
            grads[p + f"attn.{name}.bias"] += dx.sum(axis=(0, 1))
            dhin += dx @ params[p + f"attn.{name}.weight"].T
        dout = dhin

    de, dgam, dbet = _ln_backward(dout, cache.emb_ln)
    grads["embeddings.ln.weight"] += dgam
    grads["embeddings.ln.bias"] += dbet
    grads["embeddings.position"][:T] += de.sum(axis=0)
    _k.scatter_add_rows(grads["embeddings.token"], cache.ids.ravel(), flat(de))


# -- heads --------------------------------------------------------------------

def _mlm_head_forward(params: Params, cfg: ModelConfig, h: np.ndarray):
    t0 = h @ params["mlm.dense.weight"] + params["mlm.dense.bias"]
    t1 = gelu(t0)
    t2, ln = _ln_forward(t1, params["mlm.ln.weight"], params["mlm.ln.bias"], cfg.layernorm_epsilon, None)
    logits = t2 @ params["embeddings.token"].T + params["mlm.decoder.bias"]
    return logits, (h, t0, t2, ln)


def _mlm_head_backward(params: Params, cache, dlogits: np.ndarray, grads: Params) -> np.ndarray:
    h, t0, t2, ln = cache
    grads["mlm.decoder.bias"] += dlogits.sum(axis=0)
    grads["embeddings.token"] += dlogits.T @ t2
    dt2 = dlogits @ params["embeddings.token"]
    dt1, dgam, dbet = _ln_backward(dt2, ln)
    grads["mlm.ln.weight"] += dgam
    grads["mlm.ln.bias"] += dbet
    dt0 = dt1 * gelu_grad(t0)
    grads["mlm.dense.weight"] += h.T @ dt0
    grads["mlm.dense.bias"] += dt0.sum(axis=0)
    return dt0 @ params["mlm.dense.weight"].T


def forward(params: Params, cfg: ModelConfig, ids, valid=None, ablation: AblationMask | None = None):
    """MLM logits ``[batch, seq, vocab]`` at every position plus the layer trace."""
    trace, _ = encode(params, cfg, ids, valid, ablation)
    top = trace.hidden_states[-1]
    B, T, d = top.shape
    logits, _ = _mlm_head_forward(params, cfg, top.reshape(B * T, d))
    return logits.reshape(B, T, -1), trace


def mlm_logits_at(params: Params, cfg: ModelConfig, ids, positions, valid=None,
                  ablation: AblationMask | None = None) -> np.ndarray:
    """MLM logits only at ``positions`` (boolean ``[batch, seq]``), row-major order."""
    trace, _ = encode(params, cfg, ids, valid, ablation)
    logits, _ = _mlm_head_forward(params, cfg, trace.hidden_states[-1][positions])
    return logits


def mlm_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over positions whose label is not ``IGNORE``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    sel = labels != IGNORE
    if not sel.any():
        raise ValueError("mlm_loss needs at least one labelled position")
    flat = logits[sel] if logits.ndim == labels.ndim + 1 else logits
    loss, _ = _cross_entropy(flat, labels[sel])
    return loss


def probe_forward(params: Params, cfg: ModelConfig, ids, valid=None, ablation: AblationMask | None = None) -> np.ndarray:
    """Class logits from ``hs_L`` at the CLS position, shape ``[batch, n_classes]``."""
    trace, _ = encode(params, cfg, ids, valid, ablation)
    return trace.hidden_states[-1][:, 0, :] @ params["cls.weight"] + params["cls.bias"]


def backward(params: Params, cfg: ModelConfig, batch, ablation: AblationMask | None = None):
    """Loss and exact gradients of the MLM objective on a ``MaskedBatch``.

    Returns ``(loss, grads)``; ``grads`` has an entry for every parameter.
    """
    labels = np.asarray(batch.labels)
    sel = labels != IGNORE
    if not sel.any():
        raise ValueError("batch has no labelled positions")
    trace, cache = encode(params, cfg, batch.inputs, batch.valid, ablation, keep_cache=True)
    top = trace.hidden_states[-1]
    logits, head_cache = _mlm_head_forward(params, cfg, top[sel])
    loss, dlogits = _cross_entropy(logits, labels[sel])
    grads = zeros_like_params(params)
    dsel = _mlm_head_backward(params, head_cache, dlogits, grads)
    dtop = np.zeros_like(top)
    dtop[sel] = dsel
    _encode_backward(params, cfg, cache, dtop, grads)
    return loss, grads


def probe_backward(params: Params, cfg: ModelConfig, ids, labels, valid=None,
                   ablation: AblationMask | None = None):
    """Loss and gradients of mean cross-entropy for the CLS classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    trace, cache = encode(params, cfg, ids, valid, ablation, keep_cache=True)
    top = trace.hidden_states[-1]
    cls = top[:, 0, :]
    logits = cls @ params["cls.weight"] + params["cls.bias"]
    loss, dlogits = _cross_entropy(logits, labels)
    grads = zeros_like_params(params)
    grads["cls.weight"] += cls.T @ dlogits
    grads["cls.bias"] += dlogits.sum(axis=0)
    dtop = np.zeros_like(top)
    dtop[:, 0, :] = dlogits @ params["cls.weight"].T
    _encode_backward(params, cfg, cache, dtop, grads)
    return loss, grads
