"""Turn an importance report plus a target ratio into structural removal.

The plan greedily takes the lowest-scoring groups (ties broken by id) as
long as the cumulative removed-parameter fraction of the *total* model
stays at or below the target, so the achieved ratio never overshoots and
grows monotonically with the target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import PipelineError
from .groups import ATTENTION_HEAD, StructureGroup, build_groups
from .importance import ImportanceReport
from .model import TransformerLM, count_params


@dataclass
class PruningPlan:
    target_ratio: float
    removed_group_ids: tuple[int, ...]
    achieved_ratio: float
    metric_fingerprint: str = ""
    undershoot: bool = False

    def serialize(self) -> str:
        head = (
            f"# target_ratio {self.target_ratio!r}\n"
            f"# achieved_ratio {self.achieved_ratio!r}\n"
            f"# metric {self.metric_fingerprint}\n"
            f"# undershoot {int(self.undershoot)}\n"
        )
        return head + "".join(f"{gid}\n" for gid in self.removed_group_ids)


def report_fingerprint(report: ImportanceReport) -> str:
    return hashlib.sha256(report.serialize().encode("utf-8")).hexdigest()[:16]


def make_plan(report: ImportanceReport, model: TransformerLM, target_ratio: float) -> PruningPlan:
    """Longest prefix of the ascending-score group order whose cumulative
    size ratio stays <= target_ratio."""
    if not (0.0 <= target_ratio < 1.0):
        raise ValueError(f"pruning ratio must lie in [0, 1), got {target_ratio}")
    groups = build_groups(model)
    have = set(report.per_group)
    want = {g.id for g in groups}
    if have != want:
        raise ValueError(
            f"report covers {len(have)} groups but the model has {len(want)}"
        )
    total = count_params(model)
    order = sorted(groups, key=lambda g: (report.per_group[g.id], g.id))
    removed = []
    removed_size = 0
    complete = True
    for g in order:
        if (removed_size + g.size) / total <= target_ratio:
            removed.append(g.id)
            removed_size += g.size
        else:
            complete = False
            break
    achieved = removed_size / total
    undershoot = complete and achieved < target_ratio and len(removed) == len(groups)
    return PruningPlan(
        target_ratio=target_ratio,
        removed_group_ids=tuple(removed),
        achieved_ratio=achieved,
        metric_fingerprint=report_fingerprint(report),
        undershoot=undershoot,
    )


def remove_groups(model: TransformerLM, groups_to_remove) -> TransformerLM:
    """Structurally delete the given groups: the new model's matrices
    physically exclude the removed rows/columns."""
    cfg = model.config
    hd = cfg.head_dim
    removed_heads: dict[int, set] = {}
    removed_channels: dict[int, set] = {}
    for g in groups_to_remove:
        if g.kind == ATTENTION_HEAD:
            removed_heads.setdefault(g.layer, set()).add(g.slices[0].start // hd)
        else:
            removed_channels.setdefault(g.layer, set()).add(g.slices[0].start)

    out = model.copy()
    for layer, heads in removed_heads.items():
        n = model.heads_per_layer[layer]
        keep = [h for h in range(n) if h not in heads]
        row_idx = np.concatenate(
            [np.arange(h * hd, (h + 1) * hd) for h in keep]
        ) if keep else np.zeros(0, dtype=np.int64)
        for stem in ("w_q", "w_k", "w_v"):
            out.params[f"layers.{layer}.{stem}"] = np.ascontiguousarray(
                out.params[f"layers.{layer}.{stem}"][row_idx, :]
            )
        out.params[f"layers.{layer}.w_o"] = np.ascontiguousarray(
            out.params[f"layers.{layer}.w_o"][:, row_idx]
        )
        out.heads_per_layer[layer] = len(keep)
    for layer, chans in removed_channels.items():
        n = model.dff_per_layer[layer]
        keep = np.array([c for c in range(n) if c not in chans], dtype=np.int64)
        out.params[f"layers.{layer}.w_up"] = np.ascontiguousarray(
            out.params[f"layers.{layer}.w_up"][:, keep]
        )
        out.params[f"layers.{layer}.w_down"] = np.ascontiguousarray(
            out.params[f"layers.{layer}.w_down"][keep, :]
        )
        out.dff_per_layer[layer] = len(keep)
    return out


def apply_plan(model: TransformerLM, plan: PruningPlan) -> TransformerLM:
    """Execute a plan built against this model's group list."""
    groups = build_groups(model)
    by_id = {g.id: g for g in groups}
    missing = [gid for gid in plan.removed_group_ids if gid not in by_id]
    if missing:
        raise PipelineError(f"plan does not match model: unknown group ids {missing[:5]}")
    return remove_groups(model, [by_id[gid] for gid in plan.removed_group_ids])


def macs_per_token(model: TransformerLM, seq_len: int | None = None) -> int:
    """Closed-form multiply-accumulate estimate for one forward token at
    context length seq_len (defaults to max_seq_len): per layer the
    q/k/v/o projections, score and context products at the live head
    width, and the MLP matrices; plus the output head."""
    cfg = model.config
    t = seq_len if seq_len is not None else cfg.max_seq_len
    d = cfg.d_model
    hd = cfg.head_dim
    total = 0
    for i in range(cfg.n_layers):
        dh = model.heads_per_layer[i] * hd
        df = model.dff_per_layer[i]
        total += 4 * d * dh  # q, k, v projections and output projection
        total += 2 * t * dh  # attention scores and weighted context
        total += 2 * d * df  # MLP up and down
    total += d * cfg.vocab_size  # tied output head
    return total


@dataclass
class PruningStats:
    params_before: int
    params_after: int
    reduction: float
    macs_before: int
    macs_after: int
    mac_reduction: float

    def serialize(self) -> str:
        return (
            f"params_before {self.params_before}\n"
            f"params_after {self.params_after}\n"
            f"reduction {self.reduction!r}\n"
            f"macs_before {self.macs_before}\n"
            f"macs_after {self.macs_after}\n"
            f"mac_reduction {self.mac_reduction!r}\n"
        )


def pruning_stats(before: TransformerLM, after: TransformerLM) -> PruningStats:
    pb = count_params(before)
    pa = count_params(after)
    mb = macs_per_token(before)
    ma = macs_per_token(after)
    return PruningStats(
        params_before=pb,
        params_after=pa,
        reduction=(pb - pa) / pb,
        macs_before=mb,
        macs_after=ma,
        mac_reduction=(mb - ma) / mb,
    )
