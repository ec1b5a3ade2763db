from .audit import AuditLog, AuditVerdict, Channel, PrivacyViolation, audit_check
from .checkpoint import load_checkpoints, save_checkpoints
from .messages import Message, decode, encode, feature_message, gradient_message
from .reference import MonolithicTrainer
from .runtime import (
    CentralServer, Federation, Node, NodeData, TrainConfig, TrainReport, federated_step,
    predict, train,
)

__all__ = [
    "AuditLog", "AuditVerdict", "Channel", "PrivacyViolation", "audit_check",
    "load_checkpoints", "save_checkpoints",
    "Message", "decode", "encode", "feature_message", "gradient_message",
    "MonolithicTrainer",
    "CentralServer", "Federation", "Node", "NodeData", "TrainConfig", "TrainReport",
    "federated_step", "predict", "train",
]
