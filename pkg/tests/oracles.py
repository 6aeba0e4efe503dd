"""Independent reference implementations used by the tests.

Plain numpy with explicit loops; nothing here touches the tape.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def layer_norm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = row.sum() / row.size
        var = ((row - mu) ** 2).sum() / row.size
        out[idx] = (row - mu) / math.sqrt(var + eps) * g + b
    return out


def softmax_row(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def attention_loop(x, w, n_heads):
    """Self-attention over a single (s, d) sequence, one head and one query at a time."""
    s, d = x.shape
    dh = d // n_heads
    q = x @ w["wq"] + w["bq"]
    k = x @ w["wk"] + w["bk"]
    v = x @ w["wv"] + w["bv"]
    ctx = np.zeros((s, d))
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(s):
            scores = np.array([q[i, cols] @ k[j, cols] for j in range(s)]) / math.sqrt(dh)
            a = softmax_row(scores)
            for j in range(s):
                ctx[i, cols] += a[j] * v[j, cols]
    return ctx @ w["wo"] + w["bo"]


def block(x, p, n_heads):
    """Pre-norm transformer block on one (s, d) sequence."""
    attn = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    x = x + attention_loop(layer_norm(x, p["ln1.g"], p["ln1.b"]), attn, n_heads)
    h = layer_norm(x, p["ln2.g"], p["ln2.b"])
    return x + gelu(h @ p["mlp.w1"] + p["mlp.b1"]) @ p["mlp.w2"] + p["mlp.b2"]


def _blk(bb, tower, l):
    prefix = f"{tower}.blocks.{l}."
    return {k[len(prefix):]: v.data for k, v in bb.tensors.items() if k.startswith(prefix)}


def _unit(v):
    return v / np.linalg.norm(v)


def text_splice(bb, prompts, tokens):
    """Text feature for one token sequence, splicing prompt rows block by block."""
    cfg = bb.config
    pos = bb["text.pos"].data
    cls = bb["text.cls"].data + pos[0]
    content = np.stack([bb["text.tok_emb"].data[t] for t in tokens]) + pos[1:len(tokens) + 1]
    for l in range(cfg.depth):
        p = prompts[l] if prompts is not None and l < len(prompts) else np.zeros((0, cfg.d_text))
        seq = np.vstack([cls[None], p, content])
        out = block(seq, _blk(bb, "text", l), cfg.n_heads)
        cls = out[0]
        content = out[1 + len(p):]  # prompt outputs dropped
    return _unit(cls @ bb["text.proj"].data)


def vision_splice(bb, prompts, image):
    cfg = bb.config
    ps = cfg.patch_size
    c, hgt, wid = image.shape
    patches = []
    for i in range(hgt // ps):
        for j in range(wid // ps):
            patches.append(image[:, i * ps:(i + 1) * ps, j * ps:(j + 1) * ps].reshape(-1))
    pos = bb["vis.pos"].data
    content = np.array(patches) @ bb["vis.patch_w"].data + bb["vis.patch_b"].data + pos[1:]
    cls = bb["vis.cls"].data + pos[0]
    for l in range(cfg.depth):
        p = prompts[l] if prompts is not None and l < len(prompts) else np.zeros((0, cfg.d_vis))
        seq = np.vstack([cls[None], p, content])
        out = block(seq, _blk(bb, "vis", l), cfg.n_heads)
        cls = out[0]
        content = out[1 + len(p):]
    return _unit(cls @ bb["vis.proj"].data)


def classify_direct(w, f, tau):
    logits = np.array([math.exp(float(f @ wc) / tau) for wc in w])
    return logits / logits.sum()


def kl_direct(p, q):
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def mlp_direct(x, w1, b1, w2, b2):
    return gelu(x @ w1 + b1) @ w2 + b2


def gamma_direct(local, blk):
    """softmax_k(<q, F_q(flatten(P_k))>) from raw arrays."""
    q = blk["q"].data
    scores = []
    for p in local:
        key = mlp_direct(p.reshape(-1), *(blk[f"fq.{n}"].data for n in ("w1", "b1", "w2", "b2")))
        scores.append(float(q @ key))
    return softmax_row(np.array(scores))


def fa_direct(p, blk):
    flat = p.reshape(-1)
    return flat + mlp_direct(flat, *(blk[f"fa.{n}"].data for n in ("w1", "b1", "w2", "b2")))


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f()
            a[idx] = orig - h
            down = f()
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
