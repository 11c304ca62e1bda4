"""Coupled prunable structures: attention heads and MLP channels.

A group is the set of weight slices that must be removed together for
the model to stay well-formed: a head's rows of w_q/w_k/w_v plus its
columns of w_o, or a channel's column of w_up plus its row of w_down.
Only layers inside the config's prune range produce groups.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import TransformerLM

ATTENTION_HEAD = "attention_head"
MLP_CHANNEL = "mlp_channel"


@dataclass(frozen=True)
class WeightSlice:
    param: str
    axis: int
    start: int
    stop: int

    def view(self, arr):
        if self.axis == 0:
            return arr[self.start : self.stop, :]
        return arr[:, self.start : self.stop]


@dataclass(frozen=True)
class StructureGroup:
    id: int
    layer: int
    kind: str
    slices: tuple[WeightSlice, ...]
    size: int


def build_groups(model: TransformerLM) -> list[StructureGroup]:
    """Enumerate every prunable group of the model, ids dense and stable:
    per prunable layer ascending, heads first, then MLP channels."""
    cfg = model.config
    d = cfg.d_model
    hd = cfg.head_dim
    groups = []
    gid = 0
    for layer in range(cfg.prune_layer_lo, cfg.prune_layer_hi + 1):
        for h in range(model.heads_per_layer[layer]):
            lo, hi = h * hd, (h + 1) * hd
            slices = (
                WeightSlice(f"layers.{layer}.w_q", 0, lo, hi),
                WeightSlice(f"layers.{layer}.w_k", 0, lo, hi),
                WeightSlice(f"layers.{layer}.w_v", 0, lo, hi),
                WeightSlice(f"layers.{layer}.w_o", 1, lo, hi),
            )
            groups.append(StructureGroup(gid, layer, ATTENTION_HEAD, slices, 4 * hd * d))
            gid += 1
        for c in range(model.dff_per_layer[layer]):
            slices = (
                WeightSlice(f"layers.{layer}.w_up", 1, c, c + 1),
                WeightSlice(f"layers.{layer}.w_down", 0, c, c + 1),
            )
            groups.append(StructureGroup(gid, layer, MLP_CHANNEL, slices, 2 * d))
            gid += 1
    return groups


def validate_group(model: TransformerLM, group: StructureGroup) -> None:
    """Reject a group that does not belong to this model's group list."""
    current = build_groups(model)
    if group.id < 0 or group.id >= len(current) or current[group.id] != group:
        raise ValueError(f"stale group id {group.id}: not a group of this model")


def zero_group(model: TransformerLM, group: StructureGroup) -> TransformerLM:
    """Copy the model with every slice of the group set to zero."""
    validate_group(model, group)
    out = model.copy()
    for sl in group.slices:
        sl.view(out.params[sl.param])[...] = 0.0
    return out


def zero_groups(model: TransformerLM, groups) -> TransformerLM:
    """Copy the model with all slices of several groups zeroed."""
    out = model.copy()
    for group in groups:
        for sl in group.slices:
            sl.view(out.params[sl.param])[...] = 0.0
    return out


def serialize_groups(groups) -> str:
    """Audit format: one ``id kind layer size`` line per group."""
    return "".join(f"{g.id} {g.kind} {g.layer} {g.size}\n" for g in groups)
