"""Append-only audit of every frame that crosses the federation boundary."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .messages import (
    ALLOWED_TENSORS, FEATURE, GRADIENT, HEADER_KEYS, NODE_TO_SERVER, REQUIRED_TENSORS,
    SERVER_TO_NODE, Message, decode, decode_header, encode,
)


class PrivacyViolation(RuntimeError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class AuditRecord:
    seq: int
    type: str
    direction: str
    step_id: int
    branch_id: str
    phase: str
    n_bytes: int
    fields: list
    shapes: dict
    probe_hits: list = field(default_factory=list)

    @property
    def label_bearing(self) -> bool:
        return "labels" in self.shapes


class AuditLog:
    """Ordered record of frames; probes are byte patterns that must never appear."""

    def __init__(self, head_mode: str, n_nodes: int, path=None):
        self.head_mode = head_mode
        self.n_nodes = n_nodes
        self.records: list[AuditRecord] = []
        self.probes: dict[str, bytes] = {}
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self._meta()) + "\n")

    def _meta(self) -> dict:
        return {"kind": "meta", "head_mode": self.head_mode, "n_nodes": self.n_nodes}

    def add_probe(self, name: str, pattern: bytes) -> None:
        if len(pattern) < 8:
            raise ValueError("probe patterns shorter than 8 bytes collide with ordinary payloads")
        self.probes[name] = bytes(pattern)

    def record(self, frame: bytes, dynamic_probes: Iterable[tuple[str, bytes]] = ()) -> AuditRecord:
        header, _ = decode_header(frame)
        fields = sorted(k for k in header if k != "tensors") + [t["name"] for t in header["tensors"]]
        hits = [name for name, pat in list(self.probes.items()) + list(dynamic_probes)
                if frame.find(pat) != -1]
        rec = AuditRecord(
            seq=len(self.records),
            type=str(header.get("type")),
            direction=str(header.get("direction")),
            step_id=int(header.get("step_id", -1)),
            branch_id=str(header.get("branch_id")),
            phase=str(header.get("phase", "train")),
            n_bytes=len(frame),
            fields=fields,
            shapes={t["name"]: list(t["shape"]) for t in header["tensors"]},
            probe_hits=hits,
        )
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps({"kind": "message", **asdict(rec)}) + "\n")
        return rec

    @classmethod
    def read(cls, path) -> "AuditLog":
        lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        meta = lines[0]
        log = cls(meta["head_mode"], meta["n_nodes"])
        for d in lines[1:]:
            d.pop("kind")
            log.records.append(AuditRecord(**d))
        return log

    def summary(self) -> dict:
        return {
            "messages": len(self.records),
            "bytes": sum(r.n_bytes for r in self.records),
            "by_type": dict(Counter(r.type for r in self.records)),
            "label_bearing_messages": sum(r.label_bearing for r in self.records),
            "probe_hits": sum(len(r.probe_hits) for r in self.records),
        }


@dataclass
class AuditVerdict:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def record_violations(rec: AuditRecord, head_mode: str) -> list[str]:
    where = f"message #{rec.seq} ({rec.type}, step {rec.step_id}, branch {rec.branch_id})"
    out = []
    if rec.type not in ALLOWED_TENSORS:
        return [f"{where}: message type {rec.type!r} is not FeatureMessage/GradientMessage"]
    header_fields = {f for f in rec.fields if f not in rec.shapes}
    for f in sorted(header_fields - HEADER_KEYS):
        out.append(f"{where}: {rec.type} extra header field {f!r}")
    tensor_fields = set(rec.shapes)
    for f in sorted(tensor_fields - ALLOWED_TENSORS[rec.type]):
        out.append(f"{where}: {rec.type} extra field {f!r}")
    for f in sorted(REQUIRED_TENSORS[rec.type] - tensor_fields):
        out.append(f"{where}: {rec.type} missing field {f!r}")
    if rec.direction not in (NODE_TO_SERVER, SERVER_TO_NODE):
        out.append(f"{where}: unknown direction {rec.direction!r}")
    for name in rec.probe_hits:
        kind = "parameter bytes" if name.startswith("param:") else "raw-sample bytes"
        out.append(f"{where}: payload contains {kind} (probe {name})")
    if rec.type == FEATURE and "features" in rec.shapes:
        shape = rec.shapes["features"]
        if len(shape) != 3:
            out.append(f"{where}: features must be (trials, filters, length), got {shape}")
        for f in ("set_index", "labels", "align_flags"):
            if f in rec.shapes and rec.shapes[f] != shape[:1]:
                out.append(f"{where}: {f} shape {rec.shapes[f]} does not match {shape[0]} trials")
    if head_mode == "multi" and rec.label_bearing:
        out.append(f"{where}: labels crossed the boundary in multi-head mode")
    return out


def audit_check(log: AuditLog, check_counts: bool = True) -> AuditVerdict:
    violations = []
    last_feature: dict[tuple, list] = {}
    per_step = defaultdict(int)
    for rec in log.records:
        violations += record_violations(rec, log.head_mode)
        key = (rec.phase, rec.step_id, rec.branch_id)
        if rec.type == FEATURE and "features" in rec.shapes:
            last_feature[key + (rec.direction,)] = rec.shapes["features"]
        elif rec.type == GRADIENT and "gradient" in rec.shapes:
            # a gradient answers the feature message sent the other way
            opposite = NODE_TO_SERVER if rec.direction == SERVER_TO_NODE else SERVER_TO_NODE
            ref = last_feature.get(key + (opposite,))
            if ref is None:
                violations.append(f"message #{rec.seq}: gradient without a matching feature message")
            elif ref != rec.shapes["gradient"]:
                violations.append(
                    f"message #{rec.seq}: gradient shape {rec.shapes['gradient']} != features {ref}"
                )
        if rec.phase == "train":
            per_step[rec.step_id] += 1
    if check_counts:
        expected = expected_messages_per_step(log.head_mode, log.n_nodes)
        for step, n in sorted(per_step.items()):
            if n != expected:
                violations.append(f"step {step}: {n} messages, protocol allows exactly {expected}")
    return AuditVerdict(violations)


def expected_messages_per_step(head_mode: str, n_nodes: int) -> int:
    return (2 if head_mode == "unified" else 4) * n_nodes


def probe_windows(arr: np.ndarray, width: int = 4, max_windows: int = 1) -> list[bytes]:
    """Distinctive float32 byte windows from ``arr`` for containment scans.

    Windows with repeated or zero values are skipped so that constant runs
    (zero padding, freshly initialised norms) never produce false hits.
    """
    flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
    out = []
    for start in range(0, max(len(flat) - width + 1, 0)):
        w = flat[start:start + width]
        if np.all(w != 0) and len(np.unique(w)) == width:
            out.append(w.tobytes())
            if len(out) >= max_windows:
                break
    return out


class Channel:
    """In-process transport: every message is encoded, audited, then decoded."""

    def __init__(self, log: AuditLog, strict: bool = True):
        self.log = log
        self.strict = strict

    def send(self, msg: Message, probes: Iterable[tuple[str, bytes]] = ()) -> Message:
        frame = encode(msg)
        rec = self.log.record(frame, probes)
        if self.strict:
            bad = record_violations(rec, self.log.head_mode)
            if bad:
                raise PrivacyViolation(bad)
        return decode(frame)
