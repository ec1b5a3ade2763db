"""Single-process training of the same model, with no federation boundary.

Serves as the equivalence oracle for the federated loop and as the pooled
(shared-branch) baseline.
"""

from __future__ import annotations

import copy
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..alignment import aligned_flags, sandwich_loss
from ..backbones import SandwichModel
from ..data import TrialTensor
from .runtime import (
    GROUP_STRIDE, NodeData, StepResult, TrainConfig, TrainReport, _epoch_summary,
    _validation_node, accuracy, restrict_to_local, schedule,
)


class MonolithicTrainer:
    def __init__(self, model: SandwichModel, datas: dict[str, NodeData], cfg: TrainConfig,
                 label_union: Sequence[str]):
        self.model = model
        self.datas = datas
        self.cfg = cfg
        self.ids = sorted(datas)
        self.label_union = list(label_union)
        variant = next(iter(model.branches.values())).spec.variant
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate(variant),
                                          weight_decay=cfg.weight_decay)
        self.union_of = {
            d: np.array([self.label_union.index(n) if n in self.label_union else -1
                         for n in datas[d].descriptor.label_names])
            for d in self.ids
        }

    def _flags(self, d: str, labels: np.ndarray) -> np.ndarray:
        names = self.datas[d].descriptor.label_names
        return aligned_flags([names[i] for i in labels], self.cfg.alignment.aligned_labels)

    def forward(self, batches: dict[str, TrialTensor], train: bool) -> list[torch.Tensor]:
        self.model.train(train)
        feats, groups = [], []
        for pos, d in enumerate(self.ids):
            x = torch.tensor(batches[d].data, dtype=torch.float32)
            feats.append(self.model.branch(d)(x))
            groups.append(pos * GROUP_STRIDE + batches[d].subject_index)
        z = self.model.trunk(torch.cat(feats), torch.as_tensor(np.concatenate(groups)))
        return list(torch.split(z, [batches[d].n_trials for d in self.ids]))

    def step(self, batches: dict[str, TrialTensor]) -> StepResult:
        self.optimizer.zero_grad(set_to_none=True)
        zs = self.forward(batches, train=True)
        if self.cfg.head_mode == "unified":
            labels = np.concatenate([self.union_of[d][batches[d].labels] for d in self.ids])
            cls = F.cross_entropy(self.model.heads["unified"](torch.cat(zs)), torch.as_tensor(labels))
        else:
            cls = sum(
                F.cross_entropy(self.model.head(d)(z), torch.tensor(batches[d].labels))
                for d, z in zip(self.ids, zs)
            ) / len(self.ids)
        total, terms = cls, {}
        if self.cfg.transfer_mode == "mmd":
            t = [i for i, d in enumerate(self.ids) if self.datas[d].role == "target"][0]
            src = [i for i in range(len(self.ids)) if i != t]
            res = sandwich_loss(
                cls, [zs[i] for i in src], zs[t],
                [self._flags(self.ids[i], batches[self.ids[i]].labels) for i in src],
                self._flags(self.ids[t], batches[self.ids[t]].labels),
                self.cfg.alignment,
            )
            total = res.total
            terms = {f"{self.ids[src[i]]}/{name}": float(v.detach()) for (i, name), v in res.terms.items()}
        total.backward()
        self.optimizer.step()
        return StepResult(float(total.detach()), float(cls.detach()), terms)

    def predict(self, dataset_id: str, trials: TrialTensor) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            x = torch.tensor(trials.data, dtype=torch.float32)
            z = self.model.trunk(self.model.branch(dataset_id)(x), torch.tensor(trials.subject_index))
            logits = self.model.head(dataset_id)(z).numpy()
        if self.cfg.head_mode == "multi":
            return logits.argmax(1)
        return restrict_to_local(logits, self.union_of[dataset_id])

    def train(self, epochs: Optional[int] = None) -> TrainReport:
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        target = _validation_node(self.datas)
        torch.manual_seed(cfg.seed)
        report = TrainReport()
        best = copy.deepcopy(self.model.state_dict())
        step_id = 0
        for epoch in range(epochs):
            results = []
            for idx in schedule([self.datas[d] for d in self.ids], cfg, epoch):
                batches = {d: self.datas[d].train.take(i) for d, i in zip(self.ids, idx)}
                res = self.step(batches)
                report.steps.append({"step": step_id, "epoch": epoch, "loss": res.loss,
                                     "cls_loss": res.cls_loss, "mmd": res.mmd_terms})
                results.append(res)
                step_id += 1
            val = self.datas[target].val
            acc = accuracy(self.predict(target, val), val.labels)
            report.epochs.append(_epoch_summary(epoch, results, acc))
            if report.best_val_accuracy is None or acc > report.best_val_accuracy:
                report.best_val_accuracy, report.best_epoch = acc, epoch
                best = copy.deepcopy(self.model.state_dict())
        self.model.load_state_dict(best)
        return report
