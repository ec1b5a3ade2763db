"""Transfer-learning layers: kernel MMD alignment and the deep-set block."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import FeatureTensor, ShapeError


class EstimationError(ValueError):
    pass


class GroupingError(ValueError):
    pass


class AlignmentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "rbf"  # rbf | linear
    bandwidth_rule: str = "mean_sq_l2"  # mean_sq_l2 | mean_l2 | fixed
    fixed_sigma2: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise AlignmentConfigError(f"unknown kernel {self.kind!r}")
        if self.bandwidth_rule not in ("mean_sq_l2", "mean_l2", "fixed"):
            raise AlignmentConfigError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.bandwidth_rule == "fixed" and not (self.fixed_sigma2 or 0) > 0:
            raise AlignmentConfigError("fixed bandwidth needs fixed_sigma2 > 0")


@dataclass(frozen=True)
class AlignmentConfig:
    lambda_weight: float = 1.0
    aligned_labels: tuple[str, ...] = ("LH", "RH")
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        object.__setattr__(self, "aligned_labels", tuple(self.aligned_labels))
        if self.lambda_weight < 0:
            raise AlignmentConfigError("lambda_weight must be >= 0")


def _flat(x) -> torch.Tensor:
    if isinstance(x, FeatureTensor):
        x = torch.tensor(x.values)
    x = torch.as_tensor(x)
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def rbf_bandwidth(joint: torch.Tensor, kernel: KernelConfig) -> torch.Tensor:
    """sigma^2 from the concatenated batch; no gradient flows through it."""
    if kernel.bandwidth_rule == "fixed":
        return torch.tensor(kernel.fixed_sigma2, dtype=joint.dtype)
    n = joint.shape[0]
    if n < 2:
        raise EstimationError("data-driven bandwidth needs at least 2 points")
    with torch.no_grad():
        d2 = (joint.unsqueeze(1) - joint.unsqueeze(0)).square().sum(-1)
        off = n * (n - 1)
        if kernel.bandwidth_rule == "mean_sq_l2":
            bw = d2.sum() / off
        else:
            bw = (d2.sqrt().sum() / off).square()
    if bw <= 0:
        # all points coincide; every kernel value is 1 regardless of bandwidth
        bw = torch.ones((), dtype=joint.dtype)
    return bw.detach()


def _gram(a: torch.Tensor, b: torch.Tensor, kernel: KernelConfig, sigma2) -> torch.Tensor:
    if kernel.kind == "linear":
        return a @ b.T
    d2 = (a.unsqueeze(1) - b.unsqueeze(0)).square().sum(-1)
    return torch.exp(-d2 / sigma2)


def mmd_squared(source, target, kernel: KernelConfig = KernelConfig()) -> torch.Tensor:
    """Biased (V-statistic) squared MMD between two point sets.

    Features are flattened per trial. Under the RBF kernel,
    ``k(x, y) = exp(-||x - y||^2 / sigma^2)`` with ``sigma^2`` taken from the
    joint batch.
    """
    s, t = _flat(source), _flat(target)
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise EstimationError("mmd_squared needs non-empty source and target sets")
    if s.shape[1] != t.shape[1]:
        raise ShapeError(f"feature dimension mismatch: {s.shape[1]} vs {t.shape[1]}")
    sigma2 = rbf_bandwidth(torch.cat([s, t]), kernel) if kernel.kind == "rbf" else None
    kss = _gram(s, s, kernel, sigma2).mean()
    ktt = _gram(t, t, kernel, sigma2).mean()
    kst = _gram(s, t, kernel, sigma2).mean()
    return kss + ktt - 2 * kst


class SandwichLoss(NamedTuple):
    total: torch.Tensor
    terms: dict  # (source index, aligned label) -> MMD^2 tensor, 0 when skipped


def sandwich_loss(
    classification_loss: torch.Tensor,
    source_features: Sequence[torch.Tensor],
    target_features: torch.Tensor,
    source_flags: Sequence,
    target_flags,
    cfg: AlignmentConfig,
) -> SandwichLoss:
    """Classification loss plus lambda-weighted per-class MMD to the target.

    ``*_flags`` hold, per trial, the index of its label in
    ``cfg.aligned_labels`` or -1 for any other label.
    """
    if cfg.lambda_weight < 0:
        raise AlignmentConfigError("lambda_weight must be >= 0")
    t_flags = torch.as_tensor(np.asarray(target_flags))
    terms = {}
    penalty = classification_loss.new_zeros(())
    for i, (feats, flags) in enumerate(zip(source_features, source_flags)):
        s_flags = torch.as_tensor(np.asarray(flags))
        for k, name in enumerate(cfg.aligned_labels):
            s_sel, t_sel = s_flags == k, t_flags == k
            if not bool(s_sel.any()) or not bool(t_sel.any()):
                terms[(i, name)] = classification_loss.new_zeros(())
                continue
            m = mmd_squared(feats[s_sel], target_features[t_sel], cfg.kernel)
            terms[(i, name)] = m
            penalty = penalty + m
    if cfg.lambda_weight == 0:
        return SandwichLoss(classification_loss, terms)
    return SandwichLoss(classification_loss + cfg.lambda_weight * penalty, terms)


def aligned_flags(label_names: Sequence[str], aligned: Sequence[str]) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(aligned)}
    return np.array([lookup.get(n, -1) for n in label_names], dtype=np.int64)


class MMDProjection(nn.Module):
    """1x1 feature-reduction conv to ``width`` filters, then a 1x1 conv of ``width``."""

    def __init__(self, in_filters: int, width: int = 50):
        super().__init__()
        self.reduce = nn.Conv1d(in_filters, width, 1)
        self.mix = nn.Conv1d(width, width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(F.elu(self.reduce(x)))


def mmd_projection(features: FeatureTensor, projection: MMDProjection) -> FeatureTensor:
    projection.eval()
    with torch.no_grad():
        z = projection(torch.tensor(features.values, dtype=torch.float32))
    return FeatureTensor(z.numpy(), features.branch_id, features.set_index)


# --------------------------------------------------------------------------
# Deep sets


@dataclass(frozen=True)
class SetBatch:
    """Features regrouped as (S, T, N, f) plus the permutation back to flat order."""

    values: object  # np.ndarray or torch.Tensor
    order: np.ndarray  # flat indices, row-major over (S, T)
    set_ids: np.ndarray
    branch_id: str = ""

    @property
    def shape(self):
        return tuple(self.values.shape)


def set_partition(set_index) -> tuple[np.ndarray, np.ndarray, int]:
    """Stable grouping of trials by set id; returns (order, set_ids, T)."""
    set_index = np.asarray(set_index)
    set_ids, counts = np.unique(set_index, return_counts=True)
    if len(set(counts.tolist())) != 1:
        raise GroupingError(
            "unequal trials per set: " + ", ".join(f"{s}:{c}" for s, c in zip(set_ids, counts))
        )
    order = np.argsort(set_index, kind="stable")
    return order, set_ids, int(counts[0])


def group_into_sets(features: FeatureTensor) -> SetBatch:
    order, set_ids, t = set_partition(features.set_index)
    v = features.values[order]
    return SetBatch(v.reshape(len(set_ids), t, *v.shape[1:]), order, set_ids, features.branch_id)


def ungroup(batch: SetBatch) -> FeatureTensor:
    v = np.asarray(batch.values)
    flat = v.reshape(-1, *v.shape[2:])
    out = np.empty_like(flat)
    out[batch.order] = flat
    set_index = np.empty(len(batch.order), dtype=np.int64)
    set_index[batch.order] = np.repeat(batch.set_ids, v.shape[1])
    return FeatureTensor(out, batch.branch_id, set_index)


class DeepSetBlock(nn.Module):
    """Set-summary block on (S, T, N, f).

    Each set's mean over T is mapped N -> ``hidden`` on the filter axis,
    appended to every trial of that set, and the N + hidden filters are
    projected back to N followed by ELU.
    """

    def __init__(self, n_filters: int, hidden: int = 8):
        super().__init__()
        self.n_filters = n_filters
        self.summary = nn.Linear(n_filters, hidden)
        self.project = nn.Linear(n_filters + hidden, n_filters)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s, t, n, f = x.shape
        mean = x.mean(dim=1, keepdim=True)
        summary = self.summary(mean.transpose(-1, -2)).transpose(-1, -2)
        h = torch.cat([x, summary.expand(s, t, -1, f)], dim=2)
        return F.elu(self.project(h.transpose(-1, -2)).transpose(-1, -2))

    def forward_grouped(self, x: torch.Tensor, groups) -> torch.Tensor:
        """Apply to a flat (B, N, f) batch whose trials belong to ``groups``."""
        g = np.asarray(groups.cpu() if isinstance(groups, torch.Tensor) else groups)
        try:
            order, set_ids, t = set_partition(g)
        except GroupingError:
            out = torch.empty_like(x)
            for gid in np.unique(g):
                idx = torch.as_tensor(np.flatnonzero(g == gid))
                out = out.index_copy(0, idx, self.forward(x[idx].unsqueeze(0)).squeeze(0))
            return out
        order_t = torch.as_tensor(order)
        y = self.forward(x[order_t].reshape(len(set_ids), t, *x.shape[1:]))
        out = torch.empty_like(x)
        return out.index_copy(0, order_t, y.reshape(x.shape))


def deepset_block(batch: SetBatch, block: DeepSetBlock) -> SetBatch:
    block.eval()
    with torch.no_grad():
        y = block(torch.tensor(np.asarray(batch.values), dtype=torch.float32))
    return SetBatch(y.numpy(), batch.order, batch.set_ids, batch.branch_id)
