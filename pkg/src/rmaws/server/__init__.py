from .core import (
    DeliveryPlan,
    ExecutionRecord,
    ExecutionTicket,
    HttpRoute,
    PushRoute,
    RecordState,
    ServerCore,
    SubmitResult,
    ValidationError,
)
from .handlers import HandlerFailure, HandlerRegistry, ServiceHandler, make_synthetic, synthetic_body
from .store import AppendOnlyFileStore, MemoryStore, RecordStore, StoredRecord

__all__ = [
    "AppendOnlyFileStore",
    "DeliveryPlan",
    "ExecutionRecord",
    "ExecutionTicket",
    "HandlerFailure",
    "HandlerRegistry",
    "HttpRoute",
    "MemoryStore",
    "PushRoute",
    "RecordState",
    "RecordStore",
    "ServerCore",
    "ServiceHandler",
    "StoredRecord",
    "SubmitResult",
    "ValidationError",
    "make_synthetic",
    "synthetic_body",
]
