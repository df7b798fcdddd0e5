"""Independent reference implementations used as test oracles.

Everything here is written with plain loops / float64 numpy and shares no
code with the package beyond reading parameter arrays.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize


def numeric_grad(f, arrays, step=1e-5):
    """Central finite differences of scalar ``f()`` wrt each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + step
            up = f()
            a[idx] = old - step
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-5):
    """Largest |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps exactly-zero gradients (e.g. key biases under softmax)
    from dividing finite-difference round-off (~1e-10 at step 1e-5) by zero.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def softmax_ref(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def layer_norm_ref(x, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / np.sqrt(var + eps) for v in x]) * gain + bias


def mha_ref(x, p, heads):
    """Per-head loops over rows; ``p`` maps wq/bq/... to float64 arrays (in, out)."""
    n, d = x.shape
    dh = d // heads
    q = x @ p["wq"] + p["bq"]
    k = x @ p["wk"] + p["bk"]
    v = x @ p["wv"] + p["bv"]
    ctx = np.zeros((n, d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, cols] @ k[j, cols] for j in range(n)]) / np.sqrt(dh)
            w = softmax_ref(scores)
            ctx[i, cols] = sum(w[j] * v[j, cols] for j in range(n))
    return ctx @ p["wo"] + p["bo"]


def encoder_ref(model, inputs):
    """Layer-by-layer forward pass of an attention model on one (k+1, D) sequence."""
    st = {k: v.astype(np.float64) for k, v in model.state_dict().items()}
    c = model.config
    n = len(inputs)
    x = np.asarray(inputs, dtype=np.float64)
    pe = st["pe"][:n]
    if c.position_only:
        h = pe.copy()
    elif c.use_positional_encoding:
        h = x + pe
    else:
        h = x.copy()
    for layer in range(c.layers):
        pre = f"layer{layer}."
        if c.use_self_attention:
            p = {k: st[pre + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
            a = mha_ref(h, p, c.heads)
        else:
            a = h @ st[pre + "mix.w"] + st[pre + "mix.b"]
        h = np.array([layer_norm_ref(r, st[pre + "ln1.g"], st[pre + "ln1.b"], c.ln_eps) for r in h + a])
        f = np.maximum(h @ st[pre + "ffn.w1"] + st[pre + "ffn.b1"], 0) @ st[pre + "ffn.w2"] + st[pre + "ffn.b2"]
        h = np.array([layer_norm_ref(r, st[pre + "ln2.g"], st[pre + "ln2.b"], c.ln_eps) for r in h + f])
    return h


def cosine_weights_ref(t):
    t = np.asarray(t, dtype=np.float64)
    return np.array([t[0] @ r / (np.linalg.norm(t[0]) * np.linalg.norm(r)) for r in t])


def aggregate_ref(vectors, weights):
    s = sum(w * np.asarray(v, dtype=np.float64) for w, v in zip(weights, vectors))
    return s / np.linalg.norm(s)


def ap_reference(ranked, positives, junk):
    """Trapezoidal AP written as an explicit scan with running counters."""
    positives, junk = set(positives), set(junk)
    total = 0.0
    found = 0
    position = 0
    for item in ranked:
        if item in junk:
            continue
        if item in positives:
            precision_before = 1.0 if position == 0 else found / position
            precision_after = (found + 1) / (position + 1)
            total += (precision_before + precision_after) / 2.0
            found += 1
        position += 1
    return total / len(positives)


def svm_dual_oracle(pos, neg, c):
    """Box-constrained dual QP solved with L-BFGS-B; returns (alpha, objective)."""
    x = np.vstack([pos, neg]).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    qm = (y[:, None] * y[None, :]) * (x @ x.T)

    def f(a):
        return 0.5 * a @ qm @ a - a.sum(), qm @ a - 1.0

    res = minimize(f, np.zeros(len(y)), jac=True, method="L-BFGS-B",
                   bounds=[(0, c)] * len(y), options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    return res.x, float(res.fun)


def brute_knn(rows, ids, q, k, exclude=(), largest=True):
    """Exhaustive sort; ties by ascending id, and bottom-k is the exact reverse."""
    skip = set(exclude)
    sims = sorted(((float(r @ q), i) for r, i in zip(rows, ids) if i not in skip),
                  key=lambda t: (-t[0], t[1]))
    if not largest:
        sims.reverse()
    return sims[:k]


def sampled_grad_check(f, params, analytic, rng, per_tensor=6, step=1e-5, floor=1e-5):
    """Max relative error over ``per_tensor`` random coordinates of every tensor."""
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        for j in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + step
            up = f()
            flat[j] = old - step
            down = f()
            flat[j] = old
            n = (up - down) / (2 * step)
            g = a.reshape(-1)[j]
            worst = max(worst, abs(g - n) / max(abs(g), abs(n), floor))
    return worst
