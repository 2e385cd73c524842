"""Plain numpy encoder-decoder used as an oracle for the FiD model.

Written from the architecture description only (pre-norm blocks, tanh
GELU, tied output embedding); it shares no code with fidqa.model and
handles exactly one input sequence, i.e. a vanilla seq2seq model.
"""

import math

import numpy as np

NEG = -1e9


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _mha(P, pre, xq, xkv, keep, n_heads):
    """keep: boolean (Tq, Tk) matrix of allowed query/key pairs."""
    d = xq.shape[-1]
    dh = d // n_heads
    out = np.zeros((xq.shape[0], d))
    q = xq @ P[pre + ".wq"] + P[pre + ".bq"]
    k = xkv @ P[pre + ".wk"] + P[pre + ".bk"]
    v = xkv @ P[pre + ".wv"] + P[pre + ".bv"]
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s = np.where(keep, s, s + NEG)
        out[:, sl] = _softmax(s) @ v[:, sl]
    return out @ P[pre + ".wo"] + P[pre + ".bo"]


def _ff(P, pre, x):
    return _gelu(x @ P[pre + ".w1"] + P[pre + ".b1"]) @ P[pre + ".w2"] + P[pre + ".b2"]


def encode(P, cfg, ids):
    ids = np.asarray(ids)
    eps = cfg.layer_norm_eps
    keep = np.broadcast_to(ids != 0, (len(ids), len(ids)))
    x = P["embed"][ids] + P["enc.pos"][:len(ids)]
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        x = x + _mha(P, p + ".attn", _ln(x, P[p + ".attn_norm.g"], P[p + ".attn_norm.b"], eps),
                     _ln(x, P[p + ".attn_norm.g"], P[p + ".attn_norm.b"], eps), keep, cfg.n_heads)
        x = x + _ff(P, p + ".ff", _ln(x, P[p + ".ff_norm.g"], P[p + ".ff_norm.b"], eps))
    return _ln(x, P["enc.norm.g"], P["enc.norm.b"], eps)


def decode(P, cfg, memory, memory_keep, prefix):
    """Logits (T, V) for every prefix position."""
    prefix = np.asarray(prefix)
    eps = cfg.layer_norm_eps
    t = len(prefix)
    causal = np.tril(np.ones((t, t), dtype=bool))
    cross = np.broadcast_to(memory_keep, (t, len(memory_keep)))
    y = P["embed"][prefix] + P["dec.pos"][:t]
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        h = _ln(y, P[p + ".self_norm.g"], P[p + ".self_norm.b"], eps)
        y = y + _mha(P, p + ".self_attn", h, h, causal, cfg.n_heads)
        h = _ln(y, P[p + ".cross_norm.g"], P[p + ".cross_norm.b"], eps)
        y = y + _mha(P, p + ".cross_attn", h, memory, cross, cfg.n_heads)
        y = y + _ff(P, p + ".ff", _ln(y, P[p + ".ff_norm.g"], P[p + ".ff_norm.b"], eps))
    y = _ln(y, P["dec.norm.g"], P["dec.norm.b"], eps)
    return y @ P["embed"].T


def greedy(P, cfg, ids, max_len, start=3, eos=1):
    ids = np.asarray(ids)
    memory = encode(P, cfg, ids)
    prefix, out = [start], []
    for _ in range(max_len):
        nxt = int(np.argmax(decode(P, cfg, memory, ids != 0, prefix)[-1]))
        if nxt == eos:
            break
        out.append(nxt)
        if len(prefix) == max_len:
            break
        prefix.append(nxt)
    return out
