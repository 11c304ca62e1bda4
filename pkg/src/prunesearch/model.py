"""Small decoder-only transformer with exact float64 gradients.

Architecture (fixed): pre-norm decoder blocks, learned positional
embeddings, multi-head causal self-attention, GELU (tanh form) MLP,
tied input/output embedding, layer-norm eps 1e-5. Everything runs in
float64 so finite-difference checks can be tight.

Weight storage conventions:
  * attention projections ``w_q/w_k/w_v`` are (head_dim*heads, d_model),
    applied as ``h @ W.T`` — a head owns a contiguous block of rows;
  * ``w_o`` is (d_model, head_dim*heads) — a head owns columns;
  * MLP ``w_up`` is (d_model, d_ff) and ``w_down`` is (d_ff, d_model) —
    a channel owns one column of ``w_up`` and one row of ``w_down``.

Structural pruning shrinks per-layer head counts and MLP widths, so the
live model carries ``heads_per_layer`` / ``dff_per_layer`` alongside the
original config. The per-head scale stays 1/sqrt(head_dim) of the
original geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigurationError

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    prune_layer_lo: int = 0
    prune_layer_hi: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not (0 <= self.prune_layer_lo <= self.prune_layer_hi < self.n_layers):
            raise ConfigurationError(
                f"prune layer range [{self.prune_layer_lo}, {self.prune_layer_hi}] "
                f"invalid for n_layers={self.n_layers}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "prune_layer_lo": self.prune_layer_lo,
            "prune_layer_hi": self.prune_layer_hi,
            "seed": self.seed,
        }


def param_layout(config: ModelConfig, heads_per_layer, dff_per_layer):
    """Parameter names and shapes in declaration (serialization) order."""
    d = config.d_model
    hd = config.head_dim
    layout = [
        ("embedding", (config.vocab_size, d)),
        ("pos_embedding", (config.max_seq_len, d)),
    ]
    for i in range(config.n_layers):
        dh = heads_per_layer[i] * hd
        df = dff_per_layer[i]
        layout += [
            (f"layers.{i}.ln1_g", (d,)),
            (f"layers.{i}.ln1_b", (d,)),
            (f"layers.{i}.w_q", (dh, d)),
            (f"layers.{i}.w_k", (dh, d)),
            (f"layers.{i}.w_v", (dh, d)),
            (f"layers.{i}.w_o", (d, dh)),
            (f"layers.{i}.ln2_g", (d,)),
            (f"layers.{i}.ln2_b", (d,)),
            (f"layers.{i}.w_up", (d, df)),
            (f"layers.{i}.w_down", (df, d)),
        ]
    layout += [("final_ln_g", (d,)), ("final_ln_b", (d,))]
    return layout


class TransformerLM:
    """Parameter container plus forward/backward evaluation."""

    def __init__(self, config: ModelConfig, params: dict, heads_per_layer=None, dff_per_layer=None):
        self.config = config
        self.params = params
        self.heads_per_layer = list(
            heads_per_layer if heads_per_layer is not None else [config.n_heads] * config.n_layers
        )
        self.dff_per_layer = list(
            dff_per_layer if dff_per_layer is not None else [config.d_ff] * config.n_layers
        )

    def param_names(self) -> list[str]:
        return [name for name, _ in param_layout(self.config, self.heads_per_layer, self.dff_per_layer)]

    def copy(self) -> "TransformerLM":
        return TransformerLM(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.heads_per_layer,
            self.dff_per_layer,
        )


def init_model(config: ModelConfig) -> TransformerLM:
    """Seeded init: matrices uniform(-s, s) with s = 1/sqrt(d_model),
    norm scales 1, norm biases 0. Identical seed gives identical params."""
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / math.sqrt(config.d_model)
    heads = [config.n_heads] * config.n_layers
    dffs = [config.d_ff] * config.n_layers
    params = {}
    for name, shape in param_layout(config, heads, dffs):
        if name.endswith(("_g",)):
            params[name] = np.ones(shape)
        elif name.endswith(("_b",)):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-scale, scale, size=shape)
    return TransformerLM(config, params)


def count_params(model: TransformerLM, prunable_only: bool = False) -> int:
    """Total scalar parameter count; ``prunable_only`` restricts to the
    attention/MLP matrices of layers in the prune range."""
    if not prunable_only:
        return sum(int(p.size) for p in model.params.values())
    cfg = model.config
    total = 0
    for i in range(cfg.prune_layer_lo, cfg.prune_layer_hi + 1):
        for stem in ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down"):
            total += int(model.params[f"layers.{i}.{stem}"].size)
    return total


def _as_batch(sequences) -> np.ndarray:
    arr = np.asarray(sequences, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _validate_tokens(model: TransformerLM, tokens: np.ndarray) -> None:
    cfg = model.config
    if tokens.shape[1] < 2:
        raise ValueError(f"sequences must have length >= 2, got {tokens.shape[1]}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(
            f"token ids must be in [0, {cfg.vocab_size}), got range "
            f"[{tokens.min()}, {tokens.max()}]"
        )


def forward(model: TransformerLM, tokens: np.ndarray, keep_cache: bool = False):
    """Run the decoder on an int64 (B, T) batch. Returns (logits, cache);
    cache is None unless ``keep_cache``."""
    cfg = model.config
    p = model.params
    b, t = tokens.shape
    hd = cfg.head_dim
    inv = 1.0 / math.sqrt(hd)

    x = p["embedding"][tokens] + p["pos_embedding"][:t]
    layers = [] if keep_cache else None
    for i in range(cfg.n_layers):
        heads = model.heads_per_layer[i]
        df = model.dff_per_layer[i]
        cache_l = {"x_in": x} if keep_cache else None

        if heads > 0:
            a2, mean1, rstd1 = K.layernorm_fwd(
                np.ascontiguousarray(x.reshape(b * t, -1)), p[f"layers.{i}.ln1_g"],
                p[f"layers.{i}.ln1_b"], LN_EPS,
            )
            a = a2.reshape(b, t, -1)
            dh = heads * hd
            q = (a @ p[f"layers.{i}.w_q"].T).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
            k = (a @ p[f"layers.{i}.w_k"].T).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
            v = (a @ p[f"layers.{i}.w_v"].T).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
            scores = np.ascontiguousarray(
                (q @ k.transpose(0, 1, 3, 2)) * inv
            ).reshape(b * heads, t, t)
            probs = K.causal_softmax_fwd(scores).reshape(b, heads, t, t)
            c = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, dh)
            x = x + c @ p[f"layers.{i}.w_o"].T
            if keep_cache:
                cache_l.update(a=a, mean1=mean1, rstd1=rstd1, q=q, k=k, v=v, probs=probs, c=c)
        if keep_cache:
            cache_l["x_mid"] = x

        if df > 0:
            m2, mean2, rstd2 = K.layernorm_fwd(
                np.ascontiguousarray(x.reshape(b * t, -1)), p[f"layers.{i}.ln2_g"],
                p[f"layers.{i}.ln2_b"], LN_EPS,
            )
            m = m2.reshape(b, t, -1)
            u = m @ p[f"layers.{i}.w_up"]
            g = K.gelu_fwd(np.ascontiguousarray(u))
            x = x + g @ p[f"layers.{i}.w_down"]
            if keep_cache:
                cache_l.update(m=m, mean2=mean2, rstd2=rstd2, u=u, g=g)
        if keep_cache:
            layers.append(cache_l)

    x2, meanf, rstdf = K.layernorm_fwd(
        np.ascontiguousarray(x.reshape(b * t, -1)), p["final_ln_g"], p["final_ln_b"], LN_EPS
    )
    xf = x2.reshape(b, t, -1)
    logits = xf @ p["embedding"].T
    cache = None
    if keep_cache:
        cache = {"layers": layers, "x_last": x, "xf": xf, "meanf": meanf, "rstdf": rstdf}
    return logits, cache


def logits_for(model: TransformerLM, sequences) -> np.ndarray:
    """Convenience wrapper: validate and return logits for a batch."""
    tokens = _as_batch(sequences)
    _validate_tokens(model, tokens)
    return forward(model, tokens)[0]


def _per_sample_nll(model: TransformerLM, tokens: np.ndarray, keep_cache=False):
    """Per-sample mean next-token NLL. Returns (losses (B,), aux) where aux
    carries what backward needs."""
    b, t = tokens.shape
    logits, cache = forward(model, tokens, keep_cache=keep_cache)
    flat = np.ascontiguousarray(logits[:, : t - 1, :].reshape(b * (t - 1), -1))
    targets = np.ascontiguousarray(tokens[:, 1:].reshape(-1))
    nll, probs = K.cross_entropy_fwd(flat, targets)
    losses = nll.reshape(b, t - 1).mean(axis=1)
    aux = None
    if keep_cache:
        aux = {"cache": cache, "probs": probs, "targets": targets, "tokens": tokens}
    return losses, aux


def loss(model: TransformerLM, batch) -> float:
    """Average next-token cross-entropy over a batch of token sequences:
    the mean over samples of each sample's mean positionwise NLL."""
    sequences = list(batch)
    if not sequences:
        raise ValueError("empty batch")
    groups: dict[int, list] = {}
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        groups.setdefault(len(seq), []).append(seq)
    total = 0.0
    for length in sorted(groups):
        tokens = _as_batch(groups[length])
        _validate_tokens(model, tokens)
        losses, _ = _per_sample_nll(model, tokens)
        total += float(losses.sum())
    return total / len(sequences)


def backward(model: TransformerLM, aux) -> dict:
    """Gradients of the SUM over the batch of per-sample mean NLL.
    Caller rescales (e.g. /N for the batch-mean loss)."""
    cfg = model.config
    p = model.params
    tokens = aux["tokens"]
    cache = aux["cache"]
    b, t = tokens.shape
    hd = cfg.head_dim
    inv = 1.0 / math.sqrt(hd)
    grads = {name: np.zeros_like(p[name]) for name in p}

    # d(sum of per-sample means) / dlogits
    dlogits = np.zeros((b, t, cfg.vocab_size))
    dflat = aux["probs"].copy()
    dflat[np.arange(dflat.shape[0]), aux["targets"]] -= 1.0
    dlogits[:, : t - 1, :] = dflat.reshape(b, t - 1, -1) / (t - 1)

    xf = cache["xf"]
    dxf = dlogits @ p["embedding"]
    grads["embedding"] += dlogits.reshape(-1, cfg.vocab_size).T @ xf.reshape(-1, cfg.d_model)

    dx2, dgf, dbf = K.layernorm_bwd(
        np.ascontiguousarray(dxf.reshape(b * t, -1)),
        np.ascontiguousarray(cache["x_last"].reshape(b * t, -1)),
        p["final_ln_g"], cache["meanf"], cache["rstdf"],
    )
    grads["final_ln_g"] += dgf
    grads["final_ln_b"] += dbf
    dx = dx2.reshape(b, t, -1)

    for i in reversed(range(cfg.n_layers)):
        cl = cache["layers"][i]
        heads = model.heads_per_layer[i]
        df = model.dff_per_layer[i]

        if df > 0:
            dd2 = dx.reshape(b * t, -1)
            grads[f"layers.{i}.w_down"] += cl["g"].reshape(b * t, -1).T @ dd2
            dg = dx @ p[f"layers.{i}.w_down"].T
            du = K.gelu_bwd(np.ascontiguousarray(dg), np.ascontiguousarray(cl["u"]))
            grads[f"layers.{i}.w_up"] += cl["m"].reshape(b * t, -1).T @ du.reshape(b * t, -1)
            dm = du @ p[f"layers.{i}.w_up"].T
            dxm, dg2, db2 = K.layernorm_bwd(
                np.ascontiguousarray(dm.reshape(b * t, -1)),
                np.ascontiguousarray(cl["x_mid"].reshape(b * t, -1)),
                p[f"layers.{i}.ln2_g"], cl["mean2"], cl["rstd2"],
            )
            grads[f"layers.{i}.ln2_g"] += dg2
            grads[f"layers.{i}.ln2_b"] += db2
            dx = dx + dxm.reshape(b, t, -1)

        if heads > 0:
            dh = heads * hd
            do2 = dx.reshape(b * t, -1)
            grads[f"layers.{i}.w_o"] += do2.T @ cl["c"].reshape(b * t, -1)
            dc = (dx @ p[f"layers.{i}.w_o"]).reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
            dprobs = np.ascontiguousarray(dc @ cl["v"].transpose(0, 1, 3, 2)).reshape(
                b * heads, t, t
            )
            dv = cl["probs"].transpose(0, 1, 3, 2) @ dc
            ds = K.causal_softmax_bwd(
                dprobs, np.ascontiguousarray(cl["probs"].reshape(b * heads, t, t))
            ).reshape(b, heads, t, t)
            dq = (ds @ cl["k"]) * inv
            dk = (ds.transpose(0, 1, 3, 2) @ cl["q"]) * inv

            dq2 = dq.transpose(0, 2, 1, 3).reshape(b * t, dh)
            dk2 = dk.transpose(0, 2, 1, 3).reshape(b * t, dh)
            dv2 = dv.transpose(0, 2, 1, 3).reshape(b * t, dh)
            a2 = cl["a"].reshape(b * t, -1)
            grads[f"layers.{i}.w_q"] += dq2.T @ a2
            grads[f"layers.{i}.w_k"] += dk2.T @ a2
            grads[f"layers.{i}.w_v"] += dv2.T @ a2
            da = dq2 @ p[f"layers.{i}.w_q"] + dk2 @ p[f"layers.{i}.w_k"] + dv2 @ p[f"layers.{i}.w_v"]
            dxa, dg1, db1 = K.layernorm_bwd(
                np.ascontiguousarray(da),
                np.ascontiguousarray(cl["x_in"].reshape(b * t, -1)),
                p[f"layers.{i}.ln1_g"], cl["mean1"], cl["rstd1"],
            )
            grads[f"layers.{i}.ln1_g"] += dg1
            grads[f"layers.{i}.ln1_b"] += db1
            dx = dx + dxa.reshape(b, t, -1)

    np.add.at(grads["embedding"], tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["pos_embedding"][:t] += dx.sum(axis=0)
    return grads


class GradientStore:
    """Batch-mean gradients, optionally with the per-sample gradients that
    the Fisher terms consume."""

    def __init__(self, batch: dict, per_sample: list | None = None):
        self.batch = batch
        self.per_sample = per_sample
        self._sq = None

    @property
    def n_samples(self) -> int | None:
        return None if self.per_sample is None else len(self.per_sample)

    def squared_sum(self) -> dict:
        """Elementwise sum over samples of squared per-sample gradients."""
        if self.per_sample is None:
            raise ValueError("per-sample gradients were not computed")
        if self._sq is None:
            sq = {name: np.zeros_like(arr) for name, arr in self.batch.items()}
            for g in self.per_sample:
                for name, arr in g.items():
                    sq[name] += arr * arr
            self._sq = sq
        return self._sq


def gradients(model: TransformerLM, calib, per_sample: bool = False) -> GradientStore:
    """Exact reverse-mode gradients of loss() over a calibration batch.

    ``calib`` is a list of token sequences or an object exposing
    ``.sequences``. With ``per_sample`` the store also carries each
    sample's own gradients and the batch gradients are their exact mean;
    otherwise the batch path runs one grouped backward pass.
    """
    sequences = list(getattr(calib, "sequences", calib))
    if not sequences:
        raise ValueError("empty calibration batch")
    n = len(sequences)

    if per_sample:
        per = []
        mean: dict[str, np.ndarray] = {}
        for seq in sequences:
            tokens = _as_batch(np.asarray(seq, dtype=np.int64))
            _validate_tokens(model, tokens)
            _, aux = _per_sample_nll(model, tokens, keep_cache=True)
            g = backward(model, aux)
            per.append(g)
            for name, arr in g.items():
                if name in mean:
                    mean[name] += arr
                else:
                    mean[name] = arr.copy()
        for name in mean:
            mean[name] /= n
        return GradientStore(mean, per)

    groups: dict[int, list] = {}
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        groups.setdefault(len(seq), []).append(seq)
    total: dict[str, np.ndarray] = {}
    for length in sorted(groups):
        tokens = _as_batch(groups[length])
        _validate_tokens(model, tokens)
        _, aux = _per_sample_nll(model, tokens, keep_cache=True)
        g = backward(model, aux)
        for name, arr in g.items():
            if name in total:
                total[name] += arr
            else:
                total[name] = arr
    for name in total:
        total[name] /= n
    return GradientStore(total)
