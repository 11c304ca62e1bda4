"""Independent straight-line reference implementations used as oracles.

Deliberately written from the architecture contract with plain loops and
basic numpy, sharing no code with prunesearch.model or the kernels. Only
suitable for tiny inputs.

Architecture contract mirrored here: pre-norm blocks, learned positional
embeddings, causal softmax attention with per-head scale 1/sqrt(head_dim
of the original geometry), tanh-form GELU, layer-norm eps 1e-5, tied
embedding head, loss = mean over samples of mean positionwise NLL.
"""

import math

import numpy as np

EPS = 1e-5
C0 = math.sqrt(2.0 / math.pi)
C1 = 0.044715


def _ln(vec, g, b):
    d = len(vec)
    m = sum(vec) / d
    var = sum((x - m) ** 2 for x in vec) / d
    r = 1.0 / math.sqrt(var + EPS)
    return np.array([(vec[j] - m) * r * g[j] + b[j] for j in range(d)])


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(C0 * (x + C1 * x**3)))


def ref_logits(model, tokens, head_mask=None, channel_mask=None):
    """Forward one sequence position by position, summing per-head and
    per-channel contributions explicitly.

    head_mask[(layer, head)] = 0 silences that head's output; likewise
    channel_mask[(layer, channel)] for MLP channels. Defaults keep all.
    """
    cfg = model.config
    p = model.params
    t = len(tokens)
    hd = cfg.head_dim
    head_mask = head_mask or {}
    channel_mask = channel_mask or {}

    xs = [p["embedding"][tok].copy() + p["pos_embedding"][i] for i, tok in enumerate(tokens)]
    for li in range(cfg.n_layers):
        heads = model.heads_per_layer[li]
        dff = model.dff_per_layer[li]
        g1, b1 = p[f"layers.{li}.ln1_g"], p[f"layers.{li}.ln1_b"]
        g2, b2 = p[f"layers.{li}.ln2_g"], p[f"layers.{li}.ln2_b"]
        wq, wk = p[f"layers.{li}.w_q"], p[f"layers.{li}.w_k"]
        wv, wo = p[f"layers.{li}.w_v"], p[f"layers.{li}.w_o"]
        wup, wdown = p[f"layers.{li}.w_up"], p[f"layers.{li}.w_down"]

        if heads > 0:
            normed = [_ln(x, g1, b1) for x in xs]
            new_xs = []
            for i in range(t):
                attn_out = np.zeros(cfg.d_model)
                for h in range(heads):
                    rows = slice(h * hd, (h + 1) * hd)
                    q_i = wq[rows] @ normed[i]
                    scores = []
                    for j in range(i + 1):
                        k_j = wk[rows] @ normed[j]
                        scores.append(float(q_i @ k_j) / math.sqrt(hd))
                    mx = max(scores)
                    es = [math.exp(s - mx) for s in scores]
                    z = sum(es)
                    ctx = np.zeros(hd)
                    for j in range(i + 1):
                        v_j = wv[rows] @ normed[j]
                        ctx += (es[j] / z) * v_j
                    head_out = wo[:, rows] @ ctx
                    attn_out += head_mask.get((li, h), 1.0) * head_out
                new_xs.append(xs[i] + attn_out)
            xs = new_xs

        if dff > 0:
            new_xs = []
            for i in range(t):
                normed = _ln(xs[i], g2, b2)
                mlp_out = np.zeros(cfg.d_model)
                for c in range(dff):
                    pre = float(normed @ wup[:, c])
                    mlp_out += channel_mask.get((li, c), 1.0) * _gelu(pre) * wdown[c]
                new_xs.append(xs[i] + mlp_out)
            xs = new_xs

    logits = []
    for i in range(t):
        final = _ln(xs[i], p["final_ln_g"], p["final_ln_b"])
        logits.append(p["embedding"] @ final)
    return np.array(logits)


def ref_sequence_nll(model, tokens):
    """Positionwise next-token NLLs for one sequence (length T-1 list)."""
    logits = ref_logits(model, tokens)
    nlls = []
    for i in range(len(tokens) - 1):
        row = logits[i]
        mx = row.max()
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        nlls.append(lse - row[tokens[i + 1]])
    return nlls


def ref_loss(model, batch):
    """Mean over samples of the mean positionwise NLL."""
    per_sample = []
    for seq in batch:
        nlls = ref_sequence_nll(model, list(seq))
        per_sample.append(sum(nlls) / len(nlls))
    return sum(per_sample) / len(per_sample)


def ref_perplexity(model, windows):
    """exp of token-weighted mean NLL over windows."""
    total, count = 0.0, 0
    for w in windows:
        nlls = ref_sequence_nll(model, list(w))
        total += sum(nlls)
        count += len(nlls)
    return math.exp(total / count)
