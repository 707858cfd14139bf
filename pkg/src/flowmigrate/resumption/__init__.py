"""Local proxy that resumes interrupted HTTP(S) downloads."""

from .agent import (
    Action,
    Reason,
    Reconciliation,
    ResumeClass,
    ResumeDecision,
    TransferState,
    classify_resumability,
    decide_resume,
    detect_timeout,
    reconcile_overlap,
    relay_body,
)
from .httpio import HttpRequestHead, HttpResponseHead, parse_request_head, parse_response_head
from .proxy import Outcome, OutcomeLog, ProxyConfig, ResumptionProxy, TransferRecord

__all__ = [
    "Action", "Reason", "Reconciliation", "ResumeClass", "ResumeDecision", "TransferState",
    "classify_resumability", "decide_resume", "detect_timeout", "reconcile_overlap", "relay_body",
    "HttpRequestHead", "HttpResponseHead", "parse_request_head", "parse_response_head",
    "Outcome", "OutcomeLog", "ProxyConfig", "ResumptionProxy", "TransferRecord",
]
