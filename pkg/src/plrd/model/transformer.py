"""Pre-norm decoder-only micro-transformer in numpy, with explicit backprop.

Block layout::

    x = x + O(attn(RMSNorm(x)))        causal, multi-head, K/V heads may be shared
    x = x + Down(silu(Gate(h)) * Up(h)),  h = RMSNorm(x)

Token embeddings are tied with the output head; positions use a learned
table.  Factored slots are evaluated as ``(x @ w0) @ w1``; the product
``w0 @ w1`` is never formed.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from ..errors import InputError
from ..graph import ModelGraph
from .checkpoint import Checkpoint

NORM_EPS = 1e-5
INIT_STD = 0.02


def check_tokens(graph: ModelGraph, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] == 0:
        raise InputError(f"tokens must be a non-empty sequence or batch, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise InputError("token ids must be integers")
    if t.min() < 0 or t.max() >= graph.vocab:
        raise InputError(f"token id outside [0, {graph.vocab})")
    if t.shape[1] > graph.max_seq_len:
        raise InputError(
            f"sequence length {t.shape[1]} exceeds max_seq_len {graph.max_seq_len}"
        )
    return t.astype(np.int64)


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * r
    return xhat * g, (xhat, r, g)


def _rmsnorm_back(dy, cache):
    xhat, r, g = cache
    dg = np.sum(dy * xhat, axis=0)
    dxhat = dy * g
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _causal_mask(t):
    return np.triu(np.ones((t, t), dtype=bool), k=1)


class _Net:
    """Forward/backward over a flat parameter dict laid out by ``graph``."""

    def __init__(self, graph: ModelGraph, params: Dict[str, np.ndarray]):
        self.g = graph
        self.p = params
        self.ranks = graph.ranks

    def _linear(self, x, name, cache):
        p = self.p
        if name in self.ranks:
            h = x @ p[name + ".w0"]
            y = h @ p[name + ".w1"]
            cache[name] = (x, h)
        else:
            y = x @ p[name]
            cache[name] = (x, None)
        if self.g.bias:
            y = y + p[name + ".bias"]
        return y

    def _linear_back(self, dy, name, cache, grads):
        x, h = cache[name]
        p = self.p
        if self.g.bias:
            grads[name + ".bias"] = dy.sum(axis=0)
        if h is not None:
            w0, w1 = p[name + ".w0"], p[name + ".w1"]
            grads[name + ".w1"] = h.T @ dy
            dh = dy @ w1.T
            grads[name + ".w0"] = x.T @ dh
            return dh @ w0.T
        grads[name] = x.T @ dy
        return dy @ p[name].T

    def forward(self, tokens: np.ndarray, keep: bool = False):
        g, p = self.g, self.p
        b, t = tokens.shape
        d, nh, nkv, hd = g.d_model, g.n_heads, g.n_kv_heads, g.head_dim
        group = nh // nkv
        cache: dict = {"tokens": tokens}
        x = (p["tok_emb"][tokens] + p["pos_emb"][:t]).reshape(b * t, d)
        mask = _causal_mask(t)
        scale = 1.0 / np.sqrt(hd)
        for i in range(g.n_layers):
            pre = f"blocks.{i}."
            h, cache[pre + "attn_norm"] = _rmsnorm(x, p[pre + "attn_norm"])
            q = self._linear(h, pre + "attn.q", cache).reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
            k = self._linear(h, pre + "attn.k", cache).reshape(b, t, nkv, hd).transpose(0, 2, 1, 3)
            v = self._linear(h, pre + "attn.v", cache).reshape(b, t, nkv, hd).transpose(0, 2, 1, 3)
            if group > 1:
                k = np.repeat(k, group, axis=1)
                v = np.repeat(v, group, axis=1)
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            s = np.where(mask, -np.inf, s)
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            a = e / e.sum(axis=-1, keepdims=True)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(b * t, nh * hd)
            cache[pre + "attn"] = (q, k, v, a)
            x = x + self._linear(o, pre + "attn.o", cache)

            h, cache[pre + "mlp_norm"] = _rmsnorm(x, p[pre + "mlp_norm"])
            ga = self._linear(h, pre + "mlp.gate", cache)
            up = self._linear(h, pre + "mlp.up", cache)
            sg = _sigmoid(ga)
            m = ga * sg * up
            cache[pre + "mlp"] = (ga, sg, up)
            x = x + self._linear(m, pre + "mlp.down", cache)
        xn, cache["final_norm"] = _rmsnorm(x, p["final_norm"])
        logits = xn @ p["tok_emb"].T
        cache["xn"] = xn
        if not keep:
            cache = None
        return logits.reshape(b, t, g.vocab), cache

    def backward(self, dlogits: np.ndarray, cache) -> Dict[str, np.ndarray]:
        g, p = self.g, self.p
        tokens = cache["tokens"]
        b, t = tokens.shape
        d, nh, nkv, hd = g.d_model, g.n_heads, g.n_kv_heads, g.head_dim
        group = nh // nkv
        scale = 1.0 / np.sqrt(hd)
        grads: Dict[str, np.ndarray] = {}
        dl = dlogits.reshape(b * t, g.vocab)
        dtok = dl.T @ cache["xn"]
        dx, grads["final_norm"] = _rmsnorm_back(dl @ p["tok_emb"], cache["final_norm"])
        for i in reversed(range(g.n_layers)):
            pre = f"blocks.{i}."
            dm = self._linear_back(dx, pre + "mlp.down", cache, grads)
            ga, sg, up = cache[pre + "mlp"]
            silu = ga * sg
            dup = dm * silu
            dga = dm * up * sg * (1.0 + ga * (1.0 - sg))
            dh = self._linear_back(dga, pre + "mlp.gate", cache, grads)
            dh = dh + self._linear_back(dup, pre + "mlp.up", cache, grads)
            dn, grads[pre + "mlp_norm"] = _rmsnorm_back(dh, cache[pre + "mlp_norm"])
            dx = dx + dn

            do = self._linear_back(dx, pre + "attn.o", cache, grads)
            q, k, v, a = cache[pre + "attn"]
            do = do.reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
            da = do @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ do
            ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            if group > 1:
                dk = dk.reshape(b, nkv, group, t, hd).sum(axis=2)
                dv = dv.reshape(b, nkv, group, t, hd).sum(axis=2)
            dq = dq.transpose(0, 2, 1, 3).reshape(b * t, nh * hd)
            dk = dk.transpose(0, 2, 1, 3).reshape(b * t, nkv * hd)
            dv = dv.transpose(0, 2, 1, 3).reshape(b * t, nkv * hd)
            dh = self._linear_back(dq, pre + "attn.q", cache, grads)
            dh = dh + self._linear_back(dk, pre + "attn.k", cache, grads)
            dh = dh + self._linear_back(dv, pre + "attn.v", cache, grads)
            dn, grads[pre + "attn_norm"] = _rmsnorm_back(dh, cache[pre + "attn_norm"])
            dx = dx + dn
        np.add.at(dtok, tokens.reshape(-1), dx)
        grads["tok_emb"] = dtok
        dpos = np.zeros_like(p["pos_emb"])
        dpos[:t] = dx.reshape(b, t, d).sum(axis=0)
        grads["pos_emb"] = dpos
        return grads


def forward(ckpt: Checkpoint, tokens) -> np.ndarray:
    """Logits of shape ``(T, vocab)`` for one sequence or ``(B, T, vocab)``
    for a batch."""
    t = check_tokens(ckpt.graph, tokens)
    logits, _ = _Net(ckpt.graph, ckpt.tensors).forward(t)
    return logits[0] if np.ndim(tokens) == 1 else logits


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean token cross-entropy and its gradient with respect to ``logits``."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tg = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(tg.size), tg]))
    probs = np.exp(z - lse[:, None])
    probs[np.arange(tg.size), tg] -= 1.0
    return loss, (probs / tg.size).reshape(logits.shape)


def token_nll(ckpt: Checkpoint, inputs, targets) -> np.ndarray:
    """Per-token negative log-likelihood, shape ``(B, T)``."""
    x = check_tokens(ckpt.graph, inputs)
    logits, _ = _Net(ckpt.graph, ckpt.tensors).forward(x)
    tg = np.asarray(targets, dtype=np.int64).reshape(x.shape)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - np.take_along_axis(z, tg[..., None], axis=-1)[..., 0]


def loss_and_grads(
    graph: ModelGraph, params: Dict[str, np.ndarray], inputs, targets
) -> Tuple[float, Dict[str, np.ndarray]]:
    x = check_tokens(graph, inputs)
    tg = np.asarray(targets, dtype=np.int64).reshape(x.shape)
    net = _Net(graph, params)
    logits, cache = net.forward(x, keep=True)
    loss, dlogits = cross_entropy(logits, tg)
    return loss, net.backward(dlogits, cache)


def init_checkpoint(graph: ModelGraph, seed: int = 0, std: Optional[float] = None) -> Checkpoint:
    """Random initialization (normal, std 0.02; residual outputs scaled by
    ``1/sqrt(2 n_layers)``).  Factored slots in ``graph`` are produced by
    truncating a dense initialization."""
    from .surgery import factor_slots

    std = INIT_STD if std is None else std
    rng = np.random.default_rng(seed)
    dense = graph.dense()
    resid = std / np.sqrt(2.0 * max(graph.n_layers, 1))
    tensors = {}
    for name, shape in dense.tensor_shapes().items():
        if name.endswith("_norm"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name.endswith((".attn.o", ".mlp.down")):
            tensors[name] = rng.normal(0.0, resid, shape)
        else:
            tensors[name] = rng.normal(0.0, std, shape)
    ckpt = Checkpoint(dense, tensors)
    if graph.ranks:
        ckpt = factor_slots(ckpt, graph.ranks)
    return ckpt


def zero_checkpoint(graph: ModelGraph) -> Checkpoint:
    tensors = {n: np.zeros(s) for n, s in graph.tensor_shapes().items()}
    return Checkpoint(graph, tensors)
