"""Simulated split-learning federation.

Local nodes own raw trials, their branch and (multi-head mode) their head.
The central server owns the trunk, transfer layers and (unified mode) the
single head. Only :class:`~.messages.Message` frames pass between them, and
every frame goes through an audited :class:`~.audit.Channel`.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..alignment import AlignmentConfig, aligned_flags, sandwich_loss
from ..backbones import RoutingError, SandwichModel
from ..data import DatasetDescriptor, TrialTensor
from .audit import AuditLog, Channel, audit_check, probe_windows
from .messages import (
    FEATURE, NODE_TO_SERVER, SERVER_TO_NODE, Message, feature_message, gradient_message,
)

log = logging.getLogger(__name__)

DEFAULT_LR = {"shallow_conv": 1e-3, "inception": 5e-4}
# Deep-set groups are keyed by (branch position, local set index).
GROUP_STRIDE = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    head_mode: str = "unified"
    transfer_mode: str = "none"
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    batch_size: int = 10
    lr: Optional[float] = None
    weight_decay: float = 5e-4
    epochs: int = 1
    seed: int = 42
    trials_per_set: Optional[int] = None
    max_steps_per_epoch: Optional[int] = None

    def learning_rate(self, variant: str) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[variant]

    def set_size(self) -> Optional[int]:
        if self.transfer_mode != "deepset":
            return None
        t = self.trials_per_set or self.batch_size
        if self.batch_size % t:
            raise ConfigError("batch_size must be a multiple of trials_per_set")
        return t


@dataclass
class NodeData:
    descriptor: DatasetDescriptor
    train: TrialTensor
    val: Optional[TrialTensor] = None
    role: str = "source"  # source | target


def epoch_batches(trials: TrialTensor, batch_size: int, set_size: Optional[int],
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for one epoch.

    With ``set_size`` each batch is made of whole subject chunks of exactly
    ``set_size`` trials, as the deep-set grouping requires.
    """
    if set_size is None:
        perm = rng.permutation(trials.n_trials)
        n = trials.n_trials // batch_size
        return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n)]
    chunks = []
    for s in np.unique(trials.subject_index):
        idx = rng.permutation(np.flatnonzero(trials.subject_index == s))
        chunks += [idx[i * set_size:(i + 1) * set_size] for i in range(len(idx) // set_size)]
    order = rng.permutation(len(chunks))
    per_batch = batch_size // set_size
    n = len(chunks) // per_batch
    return [np.concatenate([chunks[j] for j in order[i * per_batch:(i + 1) * per_batch]])
            for i in range(n)]


def schedule(datas: Sequence[NodeData], cfg: TrainConfig, epoch: int) -> list[list[np.ndarray]]:
    """Per-step list of per-node index batches (nodes in the given order)."""
    per_node = [
        epoch_batches(d.train, cfg.batch_size, cfg.set_size(),
                      np.random.default_rng([cfg.seed, epoch, pos]))
        for pos, d in enumerate(datas)
    ]
    n_steps = min(len(b) for b in per_node)
    if cfg.max_steps_per_epoch is not None:
        n_steps = min(n_steps, cfg.max_steps_per_epoch)
    return [[b[i] for b in per_node] for i in range(n_steps)]


def _adam(params, cfg: TrainConfig, variant: str):
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.learning_rate(variant), weight_decay=cfg.weight_decay)


def _param_probes(owner: str, modules) -> list[tuple[str, bytes]]:
    out = []
    for m in modules:
        for name, p in m.named_parameters():
            for i, w in enumerate(probe_windows(p.detach().numpy())):
                out.append((f"param:{owner}:{name}:{i}", w))
    return out


class Node:
    def __init__(self, node_id: str, data: NodeData, model: SandwichModel, cfg: TrainConfig,
                 label_union: Sequence[str]):
        self.node_id = node_id
        self.data = data
        self.cfg = cfg
        self.branch = model.branch(node_id)
        self.head = model.head(node_id) if cfg.head_mode == "multi" else None
        owned = list(self.branch.parameters()) + (list(self.head.parameters()) if self.head else [])
        self.optimizer = _adam(owned, cfg, self.branch.spec.variant)
        names = data.descriptor.label_names
        self.flag_of_label = aligned_flags(names, cfg.alignment.aligned_labels)
        self.union_of_label = np.array(
            [list(label_union).index(n) if n in label_union else -1 for n in names], dtype=np.int64
        )
        self._features: Optional[torch.Tensor] = None
        self._transformed: Optional[torch.Tensor] = None
        self._batch: Optional[TrialTensor] = None
        self.last_loss = 0.0

    # -- probes ------------------------------------------------------------

    def data_probes(self, k: int = 8, seed: int = 0) -> list[tuple[str, bytes]]:
        """Byte windows of held trials; none may ever leave the node."""
        rng = np.random.default_rng(seed)
        out = []
        for split, trials in (("train", self.data.train), ("val", self.data.val)):
            if trials is None or trials.n_trials == 0:
                continue
            for j in range(k):
                t = rng.integers(trials.n_trials)
                c = rng.integers(trials.n_channels)
                s = rng.integers(max(trials.n_samples - 4, 1))
                for w in probe_windows(trials.data[t, c, s:s + 4]):
                    out.append((f"data:{self.node_id}:{split}:{j}", w))
        return out

    def outbound_probes(self) -> list[tuple[str, bytes]]:
        mods = [self.branch] + ([self.head] if self.head is not None else [])
        return _param_probes(f"node:{self.node_id}", mods)

    # -- protocol ----------------------------------------------------------

    def emit(self, trials: TrialTensor, step_id: int, train: bool, phase: str = "train") -> Message:
        self.branch.train(train)
        x = torch.tensor(trials.data, dtype=torch.float32)
        if train:
            self._features = self.branch(x)
        else:
            with torch.no_grad():
                self._features = self.branch(x)
        self._batch = trials
        labels = flags = None
        if phase == "train":
            if self.cfg.head_mode == "unified":
                labels = self.union_of_label[trials.labels]
            elif self.cfg.transfer_mode == "mmd":
                flags = self.flag_of_label[trials.labels]
        return feature_message(step_id, self.node_id, self._features.detach().numpy(),
                               trials.subject_index, labels=labels, align_flags=flags, phase=phase)

    def receive_transformed(self, msg: Message, n_nodes: int) -> Message:
        """Multi-head mode: local loss on server features, reply with their gradient."""
        z = torch.tensor(msg["features"]).requires_grad_(True)
        logits = self.head(z)
        target = torch.tensor(self._batch.labels)
        loss = F.cross_entropy(logits, target) / n_nodes
        loss.backward()
        self.last_loss = float(loss.detach())
        return gradient_message(msg.step_id, self.node_id, z.grad.numpy(), direction=NODE_TO_SERVER)

    def predict_from(self, msg: Message) -> np.ndarray:
        self.head.eval()
        with torch.no_grad():
            logits = self.head(torch.tensor(msg["features"]))
        return logits.argmax(1).numpy()

    def apply_gradient(self, msg: Message) -> None:
        self._features.backward(torch.tensor(msg["gradient"]))
        self._features = None


class CentralServer:
    def __init__(self, model: SandwichModel, cfg: TrainConfig, roles: dict[str, str],
                 label_union: Sequence[str]):
        self.cfg = cfg
        self.trunk = model.trunk
        self.head = model.heads["unified"] if cfg.head_mode == "unified" else None
        self.pooled_branch = model.branches["pooled"] if model.shared_branch else None
        owned = list(self.trunk.parameters()) + (list(self.head.parameters()) if self.head else [])
        variant = next(iter(model.branches.values())).spec.variant
        self.optimizer = _adam(owned, cfg, variant)
        self.roles = roles
        self.union_flags = aligned_flags(list(label_union), cfg.alignment.aligned_labels)
        self._inputs: list[torch.Tensor] = []
        self._outputs: list[torch.Tensor] = []

    def outbound_probes(self) -> list[tuple[str, bytes]]:
        mods = [self.trunk] + ([self.head] if self.head is not None else [])
        return _param_probes("server", mods)

    def run_trunk(self, msgs: Sequence[Message], train: bool) -> list[torch.Tensor]:
        self.trunk.train(train)
        xs, groups = [], []
        for pos, m in enumerate(msgs):
            xs.append(torch.tensor(m["features"]).requires_grad_(train))
            groups.append(pos * GROUP_STRIDE + m["set_index"].astype(np.int64))
        x = torch.cat(xs)
        g = torch.as_tensor(np.concatenate(groups))
        if train:
            z = self.trunk(x, g)
        else:
            with torch.no_grad():
                z = self.trunk(x, g)
        self._inputs = xs
        self._outputs = list(torch.split(z, [len(t) for t in xs]))
        return self._outputs

    def alignment(self, msgs: Sequence[Message], cls_loss: torch.Tensor):
        """Eq.-style total: classification loss plus per-source, per-class MMD."""
        if self.cfg.transfer_mode != "mmd":
            return cls_loss, {}
        target = [i for i, m in enumerate(msgs) if self.roles[m.branch_id] == "target"]
        if len(target) != 1:
            raise ConfigError("MMD alignment needs exactly one target node")
        t = target[0]

        def flags(i):
            m = msgs[i]
            if "labels" in m.tensors:
                return self.union_flags[m["labels"].astype(np.int64)]
            return m["align_flags"].astype(np.int64)

        sources = [i for i in range(len(msgs)) if i != t]
        res = sandwich_loss(
            cls_loss,
            [self._outputs[i] for i in sources],
            self._outputs[t],
            [flags(i) for i in sources],
            flags(t),
            self.cfg.alignment,
        )
        terms = {f"{msgs[sources[i]].branch_id}/{name}": float(v.detach()) for (i, name), v in res.terms.items()}
        return res.total, terms

    def input_gradients(self) -> list[np.ndarray]:
        return [x.grad.numpy() for x in self._inputs]


@dataclass
class StepResult:
    loss: float
    cls_loss: float
    mmd_terms: dict


class Federation:
    """Nodes (sorted by id), server and the audited channel between them."""

    def __init__(self, model: SandwichModel, datas: dict[str, NodeData], cfg: TrainConfig,
                 label_union: Sequence[str], audit_log: Optional[AuditLog] = None,
                 strict: bool = True):
        if model.shared_branch:
            raise ConfigError("a pooled branch cannot be federated; train it centrally")
        self.model = model
        self.cfg = cfg
        self.label_union = tuple(label_union)
        self.node_ids = sorted(datas)
        self.nodes = {nid: Node(nid, datas[nid], model, cfg, label_union) for nid in self.node_ids}
        self.server = CentralServer(model, cfg, {n: d.role for n, d in datas.items()}, label_union)
        self.audit_log = audit_log or AuditLog(cfg.head_mode, len(self.node_ids))
        self.channel = Channel(self.audit_log, strict=strict)
        self._data_probes: list[tuple[str, bytes]] = []
        for nid in self.node_ids:
            self._data_probes += self.nodes[nid].data_probes(seed=cfg.seed)
        self._predict_calls = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def node_send(self, nid: str, msg: Message) -> Message:
        probes = self._data_probes + self.nodes[nid].outbound_probes()
        return self.channel.send(msg, probes)

    def server_send(self, msg: Message) -> Message:
        return self.channel.send(msg, self._data_probes + self.server.outbound_probes())

    def zero_grad(self):
        self.server.optimizer.zero_grad(set_to_none=True)
        for n in self.nodes.values():
            n.optimizer.zero_grad(set_to_none=True)


def federated_step(fed: Federation, batches: dict[str, TrialTensor], step_id: int) -> StepResult:
    """One synchronous round over every node; all owners then take one optimizer step."""
    cfg, server = fed.cfg, fed.server
    fed.zero_grad()
    received = []
    for nid in fed.node_ids:
        msg = fed.nodes[nid].emit(batches[nid], step_id, train=True)
        received.append(fed.node_send(nid, msg))
    outputs = server.run_trunk(received, train=True)

    if cfg.head_mode == "unified":
        logits = server.head(torch.cat(outputs))
        labels = torch.as_tensor(np.concatenate([m["labels"] for m in received]).astype(np.int64))
        cls = F.cross_entropy(logits, labels)
        total, terms = server.alignment(received, cls)
        total.backward()
        cls_value = float(cls.detach())
    else:
        grads = []
        for nid, z in zip(fed.node_ids, outputs):
            back = fed.server_send(feature_message(
                step_id, nid, z.detach().numpy(), batches[nid].subject_index,
                direction=SERVER_TO_NODE))
            reply = fed.nodes[nid].receive_transformed(back, fed.n_nodes)
            grads.append(torch.tensor(fed.node_send(nid, reply)["gradient"]))
        cls_value = sum(fed.nodes[n].last_loss for n in fed.node_ids)
        zero = outputs[0].new_zeros(())
        total, terms = server.alignment(received, zero)
        surrogate = sum((z * g).sum() for z, g in zip(outputs, grads)) + total
        surrogate.backward()
        total = total + cls_value

    for nid, g in zip(fed.node_ids, server.input_gradients()):
        back = fed.server_send(gradient_message(step_id, nid, g, direction=SERVER_TO_NODE))
        fed.nodes[nid].apply_gradient(back)

    server.optimizer.step()
    for nid in fed.node_ids:
        fed.nodes[nid].optimizer.step()
    return StepResult(float(total.detach()), cls_value, terms)


def predict(fed: Federation, node_id: str, trials: TrialTensor) -> np.ndarray:
    """Labels in the node's own label space.

    Multi-head mode runs the head on the node; the server only ever returns
    features. Unified mode scores the server's 6-way logits restricted to
    the classes this node's dataset defines.
    """
    if node_id not in fed.nodes:
        raise RoutingError(f"no node {node_id!r}")
    node = fed.nodes[node_id]
    fed._predict_calls += 1
    step = fed._predict_calls
    msg = fed.node_send(node_id, node.emit(trials, step, train=False, phase="predict"))
    (z,) = fed.server.run_trunk([msg], train=False)
    if fed.cfg.head_mode == "multi":
        back = fed.server_send(feature_message(step, node_id, z.numpy(), trials.subject_index,
                                               direction=SERVER_TO_NODE, phase="predict"))
        return node.predict_from(back)
    logits = server_logits(fed, z)
    return restrict_to_local(logits, node.union_of_label)


def server_logits(fed: Federation, z: torch.Tensor) -> np.ndarray:
    fed.server.head.eval()
    with torch.no_grad():
        return fed.server.head(z).numpy()


def restrict_to_local(logits: np.ndarray, union_of_label: np.ndarray) -> np.ndarray:
    """Argmax over the union classes a dataset defines, as local label ids."""
    valid = union_of_label >= 0
    local_ids = np.flatnonzero(valid)
    cols = union_of_label[valid]
    return local_ids[np.argmax(logits[:, cols], axis=1)]


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels))) if len(labels) else float("nan")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    audit: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "audit": self.audit,
        }


def _validation_node(datas: dict[str, NodeData]) -> str:
    targets = [n for n, d in datas.items() if d.role == "target"]
    if len(targets) != 1:
        raise ConfigError(f"exactly one target dataset required, got {targets}")
    if datas[targets[0]].val is None or datas[targets[0]].val.n_trials == 0:
        raise ConfigError("target validation split is empty")
    return targets[0]


def train(fed: Federation, epochs: Optional[int] = None) -> TrainReport:
    """Synchronous federated training with best-validation checkpoint selection."""
    cfg = fed.cfg
    epochs = cfg.epochs if epochs is None else epochs
    datas = {n: fed.nodes[n].data for n in fed.node_ids}
    target = _validation_node(datas)
    torch.manual_seed(cfg.seed)
    report = TrainReport()
    best_state = copy.deepcopy(fed.model.state_dict())
    step_id = 0
    for epoch in range(epochs):
        losses = []
        for idx in schedule([datas[n] for n in fed.node_ids], cfg, epoch):
            batches = {n: datas[n].train.take(i) for n, i in zip(fed.node_ids, idx)}
            res = federated_step(fed, batches, step_id)
            report.steps.append({"step": step_id, "epoch": epoch, "loss": res.loss,
                                 "cls_loss": res.cls_loss, "mmd": res.mmd_terms})
            losses.append(res)
            step_id += 1
        val = datas[target].val
        acc = accuracy(predict(fed, target, val), val.labels)
        report.epochs.append(_epoch_summary(epoch, losses, acc))
        log.info("epoch %d loss %.4f val_acc %.3f", epoch, report.epochs[-1]["loss"], acc)
        if report.best_val_accuracy is None or acc > report.best_val_accuracy:
            report.best_val_accuracy, report.best_epoch = acc, epoch
            best_state = copy.deepcopy(fed.model.state_dict())
    fed.model.load_state_dict(best_state)
    verdict = audit_check(fed.audit_log)
    report.audit = {**fed.audit_log.summary(), "violations": verdict.violations}
    return report


def _epoch_summary(epoch: int, losses: Sequence[StepResult], acc: float) -> dict:
    mmd: dict[str, float] = {}
    for r in losses:
        for k, v in r.mmd_terms.items():
            mmd[k] = mmd.get(k, 0.0) + v / len(losses)
    return {
        "epoch": epoch,
        "loss": float(np.mean([r.loss for r in losses])) if losses else float("nan"),
        "cls_loss": float(np.mean([r.cls_loss for r in losses])) if losses else float("nan"),
        "mmd": mmd,
        "val_accuracy": acc,
    }
