"""Branch feature extractors, shared trunks and classifier heads.

Layer kernels are recorded exactly as the backbone recipes state them. The
shallow recipe is written in a ``(time, channel)`` layout, the inception
recipe in ``(channel, time)``; :func:`_to_internal` maps both onto the
``(batch, filters, channel, time)`` tensors used at runtime.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .alignment import DeepSetBlock, MMDProjection
from .data import FeatureTensor, ShapeError, TrialTensor

DEFAULT_SEED = 42
UNIFIED_LABELS = ("LH", "RH", "Feet", "Tongue", "Both hands", "Rest")


class RoutingError(KeyError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | inception | batchnorm | avgpool | dropout
    filters: Optional[int] = None
    kernel: Optional[tuple[int, int]] = None
    dilations: tuple[tuple[int, int], ...] = ()
    stride: Optional[tuple[int, int]] = None
    nonlinearity: Optional[str] = None  # applied after the layer
    p: float = 0.0
    bias: bool = True
    name: str = ""


@dataclass(frozen=True)
class BranchSpec:
    variant: str  # shallow_conv | inception
    n_channels: int
    dropout: float
    layout: str  # time_channel | channel_time
    layers: tuple[LayerSpec, ...]

    @property
    def out_filters(self) -> int:
        return [l.filters for l in self.layers if l.filters is not None][-1]


@dataclass(frozen=True)
class TrunkSpec:
    variant: str
    transfer_layer_mode: str  # none | mmd | deepset
    width: int
    common: tuple[LayerSpec, ...]
    transfer: tuple[LayerSpec, ...] = ()
    projection_width: int = 50
    deepset_hidden: int = 8

    def __post_init__(self):
        if self.transfer_layer_mode not in ("none", "mmd", "deepset"):
            raise ValueError(f"unknown transfer_layer_mode {self.transfer_layer_mode!r}")


@dataclass(frozen=True)
class HeadSpec:
    mode: str  # unified | multi
    unified_n_classes: int = 6
    label_spaces: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("unified", "multi"):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.mode == "multi" and not self.label_spaces:
            raise ValueError("multi head mode needs one label space per dataset")


# --------------------------------------------------------------------------
# Spec builders


def build_shallow_branch(
    n_channels: int,
    *,
    filters: int = 40,
    temporal_kernel: int = 25,
    pool: int = 75,
    pool_stride: int = 15,
    reduced: int = 50,
    dropout: float = 0.5,
) -> BranchSpec:
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    layers = (
        LayerSpec("conv", filters, (temporal_kernel, 1), name="temporal"),
        LayerSpec("conv", filters, (1, n_channels), bias=False, name="spatial"),
        LayerSpec("batchnorm", nonlinearity="square", name="bn"),
        LayerSpec("avgpool", kernel=(pool, 1), stride=(pool_stride, 1), nonlinearity="log", name="pool"),
        LayerSpec("dropout", p=dropout, name="dropout"),
        LayerSpec("conv", reduced, (1, 1), name="reduce"),
    )
    return BranchSpec("shallow_conv", n_channels, dropout, "time_channel", layers)


def build_inception_branch(
    n_channels: int,
    *,
    filters_per_path: int = 8,
    kernel: int = 21,
    dilations: Sequence[int] = (4, 2, 1),
    spatial_filters: int = 48,
    pool: int = 4,
    dropout: float = 0.25,
) -> BranchSpec:
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    layers = (
        LayerSpec("inception", filters_per_path, (1, kernel),
                  dilations=tuple((1, d) for d in dilations), nonlinearity="elu", name="temporal"),
        LayerSpec("conv", spatial_filters, (n_channels, 1), bias=False, name="spatial"),
        LayerSpec("batchnorm", nonlinearity="elu", name="bn"),
        LayerSpec("avgpool", kernel=(1, pool), stride=(1, pool), name="pool"),
        LayerSpec("dropout", p=dropout, name="dropout"),
    )
    return BranchSpec("inception", n_channels, dropout, "channel_time", layers)


def build_shallow_trunk(mode: str, *, width: int = 50, n_common: int = 3,
                        projection_width: int = 50, deepset_hidden: int = 8) -> TrunkSpec:
    common = tuple(
        LayerSpec("conv", width, (1, 1), nonlinearity="elu", name=f"common{i}") for i in range(n_common)
    )
    return TrunkSpec("shallow_conv", mode, width, common, (), projection_width, deepset_hidden)


def build_inception_trunk(
    mode: str,
    *,
    width: int = 48,
    kernel: int = 5,
    dilations: Sequence[int] = (8, 4, 2),
    block_kernels: Sequence[int] = (9, 5),
    dropout: float = 0.25,
    projection_width: int = 50,
    deepset_hidden: int = 8,
) -> TrunkSpec:
    if width % len(dilations):
        raise ValueError("width must split evenly across the inception paths")
    common = (
        LayerSpec("inception", width // len(dilations), (1, kernel),
                  dilations=tuple((1, d) for d in dilations), nonlinearity="elu", name="common"),
    )
    transfer: tuple[LayerSpec, ...] = ()
    if mode != "none":
        blocks = []
        for i, k in enumerate(block_kernels):
            blocks += [
                LayerSpec("conv", width, (1, k), name=f"block{i}_conv"),
                LayerSpec("conv", width, (1, 1), name=f"block{i}_pointwise"),
                LayerSpec("batchnorm", nonlinearity="elu", name=f"block{i}_bn"),
                LayerSpec("dropout", p=dropout, name=f"block{i}_dropout"),
            ]
        transfer = tuple(blocks)
    return TrunkSpec("inception", mode, width, common, transfer, projection_width, deepset_hidden)


def build_head_spec(mode: str, label_spaces: Mapping[str, int], unified_n_classes: int = 6) -> HeadSpec:
    return HeadSpec(mode, unified_n_classes, dict(label_spaces))


# --------------------------------------------------------------------------
# Modules


def _to_internal(kernel: tuple[int, int], layout: str) -> tuple[int, int]:
    """Return (channel extent, time extent)."""
    return (kernel[1], kernel[0]) if layout == "time_channel" else kernel


def _activate(x: torch.Tensor, name: Optional[str]) -> torch.Tensor:
    if name is None:
        return x
    if name == "elu":
        return F.elu(x)
    if name == "square":
        return x * x
    if name == "log":
        return torch.log(torch.clamp(x, min=1e-6))
    raise ValueError(f"unknown nonlinearity {name!r}")


class Inception2d(nn.Module):
    """Parallel dilated convolutions, 'same' padded in time, concatenated on filters."""

    def __init__(self, in_ch: int, filters: int, kernel: tuple[int, int], dilations):
        super().__init__()
        self.paths = nn.ModuleList()
        for d in dilations:
            pad_t = (kernel[1] - 1) * d[1] // 2
            self.paths.append(nn.Conv2d(in_ch, filters, kernel, dilation=d, padding=(0, pad_t)))

    def forward(self, x):
        return torch.cat([p(x) for p in self.paths], dim=1)


class _Stack(nn.Module):
    """Runs a LayerSpec sequence on (batch, filters, channel, time) tensors."""

    def __init__(self, layers: Sequence[LayerSpec], in_ch: int, layout: str = "channel_time"):
        super().__init__()
        self.specs = tuple(layers)
        self.mods = nn.ModuleList()
        ch = in_ch
        for spec in self.specs:
            if spec.kind == "conv":
                mod = nn.Conv2d(ch, spec.filters, _to_internal(spec.kernel, layout), bias=spec.bias)
                ch = spec.filters
            elif spec.kind == "inception":
                mod = Inception2d(ch, spec.filters, _to_internal(spec.kernel, layout),
                                  [_to_internal(d, layout) for d in spec.dilations])
                ch = spec.filters * len(spec.dilations)
            elif spec.kind == "batchnorm":
                mod = nn.BatchNorm2d(ch)
            elif spec.kind == "avgpool":
                mod = nn.AvgPool2d(_to_internal(spec.kernel, layout), _to_internal(spec.stride, layout))
            elif spec.kind == "dropout":
                mod = nn.Dropout(spec.p)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            self.mods.append(mod)
        self.out_ch = ch

    def forward(self, x):
        for spec, mod in zip(self.specs, self.mods):
            x = _activate(mod(x), spec.nonlinearity)
        return x


class Branch(nn.Module):
    """Per-dataset feature extractor: (B, C, T) -> (B, N, f)."""

    def __init__(self, spec: BranchSpec):
        super().__init__()
        self.spec = spec
        self.stack = _Stack(spec.layers, 1, spec.layout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.spec.n_channels:
            raise ShapeError(
                f"branch expects (batch, {self.spec.n_channels}, samples), got {tuple(x.shape)}"
            )
        y = self.stack(x.unsqueeze(1))
        if y.shape[2] != 1:
            raise ShapeError("spatial layer must collapse the channel axis")
        return y.squeeze(2)


class Trunk(nn.Module):
    """Shared common-knowledge layers plus optional transfer layers."""

    def __init__(self, spec: TrunkSpec, in_filters: int):
        super().__init__()
        self.spec = spec
        self.in_filters = in_filters
        mode = spec.transfer_layer_mode
        self.common = _Stack(spec.common, in_filters)
        self.transfer = _Stack(spec.transfer, self.common.out_ch) if spec.transfer else None
        out = self.transfer.out_ch if self.transfer is not None else self.common.out_ch
        # Deep-set blocks wrap the layers they bracket: the common convs for the
        # shallow trunk, the CNN transfer blocks for the inception trunk.
        self.pre_deepset_after_common = spec.variant == "inception"
        pre_width = self.common.out_ch if self.pre_deepset_after_common else in_filters
        self.deepset_pre = DeepSetBlock(pre_width, spec.deepset_hidden) if mode == "deepset" else None
        self.deepset_post = DeepSetBlock(out, spec.deepset_hidden) if mode == "deepset" else None
        self.projection = MMDProjection(out, spec.projection_width) if mode == "mmd" else None
        self.out_filters = spec.projection_width if mode == "mmd" else out

    def forward(self, x: torch.Tensor, groups: Optional[torch.Tensor] = None,
                taps: Optional[dict] = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_filters:
            raise ShapeError(f"trunk expects (batch, {self.in_filters}, f), got {tuple(x.shape)}")
        if self.deepset_pre is not None and not self.pre_deepset_after_common:
            x = self.deepset_pre.forward_grouped(x, _need_groups(groups, x))
        h = self.common(x.unsqueeze(2)).squeeze(2)
        if taps is not None:
            taps["common"] = h
        if self.deepset_pre is not None and self.pre_deepset_after_common:
            h = self.deepset_pre.forward_grouped(h, _need_groups(groups, h))
        if self.transfer is not None:
            h = self.transfer(h.unsqueeze(2)).squeeze(2)
        if self.deepset_post is not None:
            h = self.deepset_post.forward_grouped(h, _need_groups(groups, h))
        if self.projection is not None:
            h = self.projection(h)
        return h


def _need_groups(groups, x):
    if groups is None:
        raise ValueError("deep-set trunk needs per-trial set groups")
    if groups.shape[0] != x.shape[0]:
        raise ShapeError("groups length does not match batch")
    return groups


class Head(nn.Module):
    def __init__(self, n_features: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(n_features, n_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z.flatten(1))


@contextlib.contextmanager
def seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def branch_output_shape(spec: BranchSpec, n_samples: int) -> tuple[int, int]:
    """(filters, feature length) of a branch for ``n_samples`` input samples."""
    with seeded(0), torch.no_grad():
        b = Branch(spec).eval()
        y = b(torch.zeros(1, spec.n_channels, n_samples))
    return int(y.shape[1]), int(y.shape[2])


class SandwichModel(nn.Module):
    """Branches, trunk and heads in one process.

    The federated runtime splits these same submodules across owners; this
    class is also the monolithic reference used to check that split.
    """

    def __init__(
        self,
        branch_specs: Mapping[str, BranchSpec],
        trunk_spec: TrunkSpec,
        head_spec: HeadSpec,
        n_samples: int,
        *,
        shared_branch: bool = False,
        seed: int = DEFAULT_SEED,
    ):
        super().__init__()
        self.dataset_ids = tuple(sorted(branch_specs))
        self.shared_branch = shared_branch
        self.head_spec = head_spec
        with seeded(seed):
            if shared_branch:
                specs = {branch_specs[d] for d in self.dataset_ids}
                if len(specs) != 1:
                    raise ShapeError("a shared branch needs identical branch specs for all datasets")
                self.branches = nn.ModuleDict({"pooled": Branch(branch_specs[self.dataset_ids[0]])})
            else:
                self.branches = nn.ModuleDict({d: Branch(branch_specs[d]) for d in self.dataset_ids})

            shapes = {d: branch_output_shape(branch_specs[d], n_samples) for d in self.dataset_ids}
            if len(set(shapes.values())) != 1:
                raise ShapeError(f"branches emit different feature shapes: {shapes}")
            n_filters, f_len = next(iter(shapes.values()))
            self.feature_shape = (n_filters, f_len)
            self.trunk = Trunk(trunk_spec, n_filters)
            with torch.no_grad():
                self.trunk.eval()
                try:
                    z = self.trunk(torch.zeros(2, n_filters, f_len), torch.zeros(2, dtype=torch.long))
                except RuntimeError as e:
                    raise ShapeError(f"branch features of length {f_len} are too short for the trunk: {e}") from e
                self.trunk.train()
            self.trunk_out_shape = tuple(z.shape[1:])
            n_feat = int(np.prod(self.trunk_out_shape))
            if head_spec.mode == "unified":
                self.heads = nn.ModuleDict({"unified": Head(n_feat, head_spec.unified_n_classes)})
            else:
                self.heads = nn.ModuleDict(
                    {d: Head(n_feat, head_spec.label_spaces[d]) for d in self.dataset_ids}
                )

    def branch(self, dataset_id: str) -> Branch:
        key = "pooled" if self.shared_branch else dataset_id
        if key not in self.branches:
            raise RoutingError(f"no branch for dataset {dataset_id!r}")
        return self.branches[key]

    def head(self, dataset_id: str) -> Head:
        key = "unified" if self.head_spec.mode == "unified" else dataset_id
        if key not in self.heads:
            raise RoutingError(f"no classifier head for dataset {dataset_id!r}")
        return self.heads[key]

    def owner_map(self) -> dict[str, str]:
        """Parameter/buffer name -> owner ("node:<dataset>" or "server")."""
        owners = {}
        for name, _ in self.named_parameters():
            owners[name] = self._owner(name)
        for name, _ in self.named_buffers():
            owners[name] = self._owner(name)
        return owners

    def _owner(self, name: str) -> str:
        part, key = name.split(".")[:2]
        if part == "branches":
            return "server" if key == "pooled" else f"node:{key}"
        if part == "heads":
            return "server" if key == "unified" else f"node:{key}"
        return "server"


def forward_branch(branch: Branch, batch: TrialTensor, train_mode: bool,
                   branch_id: Optional[str] = None) -> FeatureTensor:
    branch.train(train_mode)
    with torch.no_grad():
        x = torch.tensor(batch.data, dtype=torch.float32)
        y = branch(x)
    return FeatureTensor(y.numpy(), branch_id or batch.dataset_id, batch.subject_index)


def forward_trunk(trunk: Trunk, features: FeatureTensor, train_mode: bool) -> FeatureTensor:
    trunk.train(train_mode)
    if features.values.shape[1] != trunk.in_filters:
        raise ShapeError(
            f"branch {features.branch_id!r} emits {features.values.shape[1]} filters, "
            f"trunk expects {trunk.in_filters}"
        )
    with torch.no_grad():
        x = torch.tensor(features.values, dtype=torch.float32)
        z = trunk(x, torch.tensor(features.set_index))
    return FeatureTensor(z.numpy(), features.branch_id, features.set_index)


def forward_head(model: SandwichModel, features: FeatureTensor, dataset_id: str) -> np.ndarray:
    head = model.head(dataset_id)
    with torch.no_grad():
        return head(torch.tensor(features.values, dtype=torch.float32)).numpy()


def with_dropout(spec: BranchSpec, p: float) -> BranchSpec:
    layers = tuple(replace(l, p=p) if l.kind == "dropout" else l for l in spec.layers)
    return replace(spec, dropout=p, layers=layers)
