"""rmaws: reliable request/response delivery for flaky clients.

Requests carry a globally unique identity whose (device, timestamp,
service) prefix deduplicates retries on the server; completed responses
are cached and replayed instead of re-executed; and a client whose HTTP
wait times out re-registers its request id on an open push channel, where
the response is delivered as soon as it exists. A deterministic
virtual-clock simulator exhaustively fault-injects the whole stack.
"""

from .client import Client, ClientError, Outcome, SendMachine, SendOptions, build
from .envelope import (
    OVERHEAD_BYTES,
    Channel,
    EnvelopeError,
    FrameKind,
    MalformedEnvelope,
    MalformedFrame,
    PushFrame,
    RequestEnvelope,
    RequestId,
    ResponseEnvelope,
    ResponseStatus,
    decode_push_frame,
    decode_request,
    encode_push_frame,
    encode_request,
    make_request_id,
    parse_rid,
)
from .server.core import ServerCore
from .server.http import RmawsServer, ServerConfig

__version__ = "0.1.0"

__all__ = [
    "Channel",
    "Client",
    "ClientError",
    "EnvelopeError",
    "FrameKind",
    "MalformedEnvelope",
    "MalformedFrame",
    "OVERHEAD_BYTES",
    "Outcome",
    "PushFrame",
    "RequestEnvelope",
    "RequestId",
    "ResponseEnvelope",
    "ResponseStatus",
    "RmawsServer",
    "SendMachine",
    "SendOptions",
    "ServerConfig",
    "ServerCore",
    "build",
    "decode_push_frame",
    "decode_request",
    "encode_push_frame",
    "encode_request",
    "make_request_id",
    "parse_rid",
    "__version__",
]
