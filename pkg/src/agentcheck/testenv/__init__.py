from .environment import Environment, EnvDiff, EnvSnapshot, EnvStatus, diff
from .faults import FaultKind, FaultSet, FaultSpec, LogicalClock, RetryableEnvError
from .mail import FIXED_SENDER_DOMAIN, Attachment, EmailMessage, EmailStore, Receipt
from .sandbox import HOME, CmdResult, JailViolation, PrivilegeDenied, Sandbox, split_chain

__all__ = [
    "Attachment", "CmdResult", "EmailMessage", "EmailStore", "EnvDiff", "EnvSnapshot", "EnvStatus",
    "Environment", "FIXED_SENDER_DOMAIN", "FaultKind", "FaultSet", "FaultSpec", "HOME", "JailViolation",
    "LogicalClock", "PrivilegeDenied", "Receipt", "RetryableEnvError", "Sandbox", "diff", "split_chain",
]
