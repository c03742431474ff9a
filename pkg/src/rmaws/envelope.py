"""Wire types and canonical codecs for the RMAWS protocol.

A request travels as a fixed 226-byte header followed by the raw payload,
so the envelope adds a constant number of bytes regardless of payload size.
Push-channel frames use a 100-byte header plus a raw body segment. Both
codecs are strict: any byte that deviates from the canonical form is a
decode error, and the request header carries a CRC32 so corruption of any
header field is detected rather than silently accepted.

Everything in this module is a pure function over immutable values.
"""

from __future__ import annotations

import string
import zlib
from dataclasses import dataclass
from enum import Enum

MAGIC = b"RMAWS1"

DEVICE_WIDTH = 32
TIMESTAMP_WIDTH = 20
SERVICE_WIDTH = 32
TRIAL_WIDTH = 2
RID_WIDTH = DEVICE_WIDTH + TIMESTAMP_WIDTH + SERVICE_WIDTH + TRIAL_WIDTH + 1  # 87
DEDUP_KEY_WIDTH = DEVICE_WIDTH + TIMESTAMP_WIDTH + SERVICE_WIDTH  # 84

MAX_TRIAL = 99
MAX_TIMESTAMP_MS = 10**TIMESTAMP_WIDTH - 1
LENGTH_WIDTH = 10
MAX_PAYLOAD = 10**LENGTH_WIDTH - 1

# Request header layout (all offsets in bytes):
#   RMAWS1|<rid:87>|<forced:1>|<trial:2>|<svc:32>|<pad:81>|<len:10>|<payload>
# The pad region holds an 8-hex-digit CRC32 of the rest of the header
# followed by constant filler; its width is what fixes the header at
# exactly OVERHEAD_BYTES.
OVERHEAD_BYTES = 226

_OFF_MAGIC = 0
_OFF_RID = 7
_OFF_RID_DEVICE = _OFF_RID
_OFF_RID_TS = _OFF_RID_DEVICE + DEVICE_WIDTH  # 39
_OFF_RID_SVC = _OFF_RID_TS + TIMESTAMP_WIDTH  # 59
_OFF_RID_TRIAL = _OFF_RID_SVC + SERVICE_WIDTH  # 91
_OFF_RID_FORCED = _OFF_RID_TRIAL + TRIAL_WIDTH  # 93
_OFF_FORCED = 95
_OFF_TRIAL = 97
_OFF_SVC = 100
_OFF_PAD = 133
_CRC_WIDTH = 8
_OFF_FILLER = _OFF_PAD + _CRC_WIDTH  # 141
_PAD_WIDTH = OVERHEAD_BYTES - (_OFF_PAD + 1 + LENGTH_WIDTH + 1)  # 81
_FILLER = b"0" * (_PAD_WIDTH - _CRC_WIDTH)
_OFF_LEN = _OFF_PAD + _PAD_WIDTH + 1  # 215
_SEPARATORS = (6, 94, 96, 99, 132, _OFF_PAD + _PAD_WIDTH, _OFF_LEN + LENGTH_WIDTH)

assert _OFF_LEN + LENGTH_WIDTH + 1 == OVERHEAD_BYTES

# Characters legal inside device ids and service names. '|' is the field
# separator and is banned; everything else printable-ASCII is opaque data.
_NAME_CHARS = frozenset(string.printable) - frozenset("|\t\n\r\x0b\x0c")

NIL_RID_FIELD = "0" * RID_WIDTH  # rid slot of frames that carry no rid


class EnvelopeError(ValueError):
    """Base class for all codec and identifier errors."""


class TrialOverflow(EnvelopeError):
    """Trial number outside the 1..99 range the wire format can carry."""


class InvalidServiceName(EnvelopeError):
    pass


class InvalidDeviceId(EnvelopeError):
    pass


class InvalidTimestamp(EnvelopeError):
    pass


class MalformedEnvelope(EnvelopeError):
    """Request bytes violate the canonical layout.

    ``offset`` is the byte position of the first violation; for whole-field
    checks (CRC, mirror equality, payload length) it is the start of the
    field that failed.
    """

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed envelope at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class MalformedFrame(EnvelopeError):
    """Push frame bytes violate the frame layout."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed frame at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class ResponseStatus(str, Enum):
    OK = "Ok"
    SERVICE_ERROR = "ServiceError"
    VALIDATION_ERROR = "ValidationError"
    NOT_CACHED = "NotCached"


class Channel(str, Enum):
    HTTP = "Http"
    PUSH = "Push"
    CACHE_REPLAY = "CacheReplay"


class FrameKind(str, Enum):
    REGISTER = "Register"
    REGISTER_ACK = "RegisterAck"
    DELIVER = "Deliver"
    CLOSE = "Close"


_KIND_TAGS = {
    FrameKind.REGISTER: b"R",
    FrameKind.REGISTER_ACK: b"A",
    FrameKind.DELIVER: b"D",
    FrameKind.CLOSE: b"C",
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

# Two-character status codes used in the frame meta slot.
META_NONE = "--"
META_UNAUTHORIZED = "UA"
_STATUS_CODES = {
    ResponseStatus.OK: "OK",
    ResponseStatus.SERVICE_ERROR: "SE",
    ResponseStatus.VALIDATION_ERROR: "VE",
    ResponseStatus.NOT_CACHED: "NC",
}
_CODE_STATUSES = {v: k for k, v in _STATUS_CODES.items()}


def status_code(status: ResponseStatus) -> str:
    return _STATUS_CODES[status]


def status_from_code(code: str) -> ResponseStatus:
    try:
        return _CODE_STATUSES[code]
    except KeyError:
        raise EnvelopeError(f"unknown status code {code!r}") from None


@dataclass(frozen=True)
class RequestId:
    """Globally unique request identity.

    ``device_id`` and ``service_name`` are stored in canonical fixed-width
    form (32 chars each, zero- and space-padded respectively) so that the
    rendered id round-trips exactly. The (device, timestamp, service)
    prefix is the deduplication key; ``trial`` and ``forced`` ride along
    without changing identity.
    """

    device_id: str
    timestamp_ms: int
    service_name: str
    trial: int
    forced: bool

    def canonical(self) -> str:
        return (
            f"{self.device_id}{self.timestamp_ms:0{TIMESTAMP_WIDTH}d}"
            f"{self.service_name}{self.trial:0{TRIAL_WIDTH}d}{self.forced:d}"
        )

    @property
    def dedup_key(self) -> str:
        return self.canonical()[:DEDUP_KEY_WIDTH]

    def with_trial(self, trial: int) -> "RequestId":
        if not 1 <= trial <= MAX_TRIAL:
            raise TrialOverflow(f"trial {trial} outside 1..{MAX_TRIAL}")
        return RequestId(self.device_id, self.timestamp_ms, self.service_name, trial, self.forced)

    def short(self) -> str:
        """Compact human-readable form for logs."""
        return (
            f"{self.device_id.lstrip('0') or '0'}/{self.timestamp_ms}"
            f"/{self.service_name.rstrip()}#{self.trial}{'!' if self.forced else ''}"
        )


def sanitize_service_name(name: str) -> str:
    """Strip, validate and truncate a service name to the 32-char field."""
    name = name.strip()
    if not name:
        raise InvalidServiceName("service name is empty")
    bad = set(name) - _NAME_CHARS
    if bad:
        raise InvalidServiceName(f"service name contains illegal characters {sorted(bad)!r}")
    return name[:SERVICE_WIDTH]


def _pad_service(name: str) -> str:
    return name.ljust(SERVICE_WIDTH)


def _pad_device(device_id: str) -> str:
    if not device_id:
        raise InvalidDeviceId("device id is empty")
    if len(device_id) > DEVICE_WIDTH:
        raise InvalidDeviceId(f"device id longer than {DEVICE_WIDTH} characters")
    bad = set(device_id) - _NAME_CHARS
    if bad:
        raise InvalidDeviceId(f"device id contains illegal characters {sorted(bad)!r}")
    return device_id.rjust(DEVICE_WIDTH, "0")


def make_request_id(
    device_id: str,
    timestamp_ms: int,
    service_name: str,
    trial: int = 1,
    forced: bool = False,
) -> RequestId:
    """Build a canonical RequestId. Deterministic for identical inputs."""
    if not 1 <= trial <= MAX_TRIAL:
        raise TrialOverflow(f"trial {trial} outside 1..{MAX_TRIAL}")
    if not 0 <= timestamp_ms <= MAX_TIMESTAMP_MS:
        raise InvalidTimestamp(f"timestamp {timestamp_ms} outside 0..{MAX_TIMESTAMP_MS}")
    return RequestId(
        device_id=_pad_device(device_id),
        timestamp_ms=timestamp_ms,
        service_name=_pad_service(sanitize_service_name(service_name)),
        trial=trial,
        forced=bool(forced),
    )


@dataclass(frozen=True)
class RequestEnvelope:
    """Canonical request message: identity, routing name and opaque payload.

    ``is_forced`` mirrors ``rid.forced`` (the rid is the source of truth);
    construction rejects a mismatch so the invariant cannot drift.
    """

    rid: RequestId
    is_forced: bool
    service_name: str
    payload: bytes

    def __post_init__(self):
        if self.is_forced != self.rid.forced:
            raise EnvelopeError("is_forced does not mirror rid.forced")
        if _pad_service(sanitize_service_name(self.service_name)) != self.rid.service_name:
            raise EnvelopeError("envelope service_name does not match rid.service_name")


@dataclass(frozen=True)
class ResponseEnvelope:
    """A delivered response: body bytes are exactly the handler's output."""

    rid: RequestId
    status: ResponseStatus
    channel: Channel
    body: bytes


@dataclass(frozen=True)
class PushFrame:
    """One message on the push channel.

    Deliver frames keep status metadata and the raw body in distinct
    segments so the body stays byte-exact. Register frames carry the auth
    token in the body segment; Close frames carry no rid.
    """

    kind: FrameKind
    rid: RequestId | None
    meta: str | None
    body: bytes = b""


def register_frame(rid: RequestId, token: str) -> PushFrame:
    return PushFrame(FrameKind.REGISTER, rid, None, token.encode("utf-8"))


def register_ack_frame(rid: RequestId, meta: str) -> PushFrame:
    return PushFrame(FrameKind.REGISTER_ACK, rid, meta, b"")


def deliver_frame(resp: ResponseEnvelope) -> PushFrame:
    return PushFrame(FrameKind.DELIVER, resp.rid, status_code(resp.status), resp.body)


def close_frame() -> PushFrame:
    return PushFrame(FrameKind.CLOSE, None, None, b"")


def _rid_canonical_bytes(rid: RequestId) -> bytes:
    rendered = rid.canonical()
    if len(rendered) != RID_WIDTH:
        raise EnvelopeError(f"rid renders to {len(rendered)} bytes, expected {RID_WIDTH}")
    return rendered.encode("ascii")


def _parse_rid_field(field: bytes, base: int) -> RequestId:
    """Parse the 87-byte rid region; ``base`` is its absolute offset."""
    text = field.decode("ascii", errors="replace")
    device = text[:DEVICE_WIDTH]
    ts_text = text[DEVICE_WIDTH:DEVICE_WIDTH + TIMESTAMP_WIDTH]
    svc = text[DEVICE_WIDTH + TIMESTAMP_WIDTH:DEDUP_KEY_WIDTH]
    trial_text = text[DEDUP_KEY_WIDTH:DEDUP_KEY_WIDTH + TRIAL_WIDTH]
    forced_ch = text[DEDUP_KEY_WIDTH + TRIAL_WIDTH]

    if set(device) - _NAME_CHARS:
        raise MalformedEnvelope(base, "illegal characters in device id")
    if not ts_text.isascii() or not ts_text.isdigit():
        raise MalformedEnvelope(base + DEVICE_WIDTH, "timestamp is not decimal")
    if set(svc) - _NAME_CHARS:
        raise MalformedEnvelope(base + DEVICE_WIDTH + TIMESTAMP_WIDTH, "illegal characters in service name")
    if svc != _pad_service(svc.rstrip()) or not svc.strip():
        raise MalformedEnvelope(base + DEVICE_WIDTH + TIMESTAMP_WIDTH, "service field is not canonical")
    if not trial_text.isascii() or not trial_text.isdigit():
        raise MalformedEnvelope(base + DEDUP_KEY_WIDTH, "trial is not decimal")
    trial = int(trial_text)
    if trial < 1:
        raise MalformedEnvelope(base + DEDUP_KEY_WIDTH, "trial below 1")
    if forced_ch not in "01":
        raise MalformedEnvelope(base + DEDUP_KEY_WIDTH + TRIAL_WIDTH, "forced flag is not 0/1")
    return RequestId(device, int(ts_text), svc, trial, forced_ch == "1")


def parse_rid(text: str) -> RequestId:
    """Parse an 87-character canonical rid rendering."""
    if len(text) != RID_WIDTH:
        raise EnvelopeError(f"rid rendering must be {RID_WIDTH} characters, got {len(text)}")
    return _parse_rid_field(text.encode("ascii", errors="replace"), 0)


def _header_crc(data: bytes) -> bytes:
    crc = zlib.crc32(data[:_OFF_PAD])
    crc = zlib.crc32(data[_OFF_LEN:_OFF_LEN + LENGTH_WIDTH], crc)
    return f"{crc:08x}".encode("ascii")


def encode_request(env: RequestEnvelope) -> bytes:
    """Render the canonical byte form: always ``len(payload) + 226`` bytes."""
    if len(env.payload) > MAX_PAYLOAD:
        raise EnvelopeError(f"payload exceeds {MAX_PAYLOAD} bytes")
    head = b"%s|%s|%d|%02d|%s|" % (
        MAGIC,
        _rid_canonical_bytes(env.rid),
        env.rid.forced,
        env.rid.trial,
        env.rid.service_name.encode("ascii"),
        )
    length = b"%0*d" % (LENGTH_WIDTH, len(env.payload))
    # CRC covers every header byte outside the pad region itself.
    crc = zlib.crc32(head)
    crc = zlib.crc32(length, crc)
    pad = f"{crc:08x}".encode("ascii") + _FILLER
    out = head + pad + b"|" + length + b"|" + env.payload
    assert len(out) == len(env.payload) + OVERHEAD_BYTES
    return out


def decode_request(data: bytes) -> RequestEnvelope:
    """Inverse of :func:`encode_request`; strict about every header byte."""
    if len(data) < OVERHEAD_BYTES:
        raise MalformedEnvelope(len(data), f"header needs {OVERHEAD_BYTES} bytes, got {len(data)}")
    if data[:len(MAGIC)] != MAGIC:
        off = next(i for i, (a, b) in enumerate(zip(data, MAGIC)) if a != b)
        raise MalformedEnvelope(off, "bad magic")
    for off in _SEPARATORS:
        if data[off:off + 1] != b"|":
            raise MalformedEnvelope(off, "missing field separator")

    rid = _parse_rid_field(data[_OFF_RID:_OFF_RID + RID_WIDTH], _OFF_RID)

    forced_mirror = data[_OFF_FORCED:_OFF_FORCED + 1]
    if forced_mirror not in (b"0", b"1"):
        raise MalformedEnvelope(_OFF_FORCED, "forced mirror is not 0/1")
    trial_mirror = data[_OFF_TRIAL:_OFF_TRIAL + TRIAL_WIDTH]
    if not trial_mirror.isdigit():
        raise MalformedEnvelope(_OFF_TRIAL, "trial mirror is not decimal")
    svc_mirror = data[_OFF_SVC:_OFF_SVC + SERVICE_WIDTH]

    pad = data[_OFF_PAD:_OFF_PAD + _PAD_WIDTH]
    crc_field = pad[:_CRC_WIDTH]
    if not all(c in b"0123456789abcdef" for c in crc_field):
        raise MalformedEnvelope(_OFF_PAD, "crc field is not lowercase hex")
    if pad[_CRC_WIDTH:] != _FILLER:
        bad = next(i for i, (a, b) in enumerate(zip(pad[_CRC_WIDTH:], _FILLER)) if a != b)
        raise MalformedEnvelope(_OFF_FILLER + bad, "padding filler corrupted")

    len_field = data[_OFF_LEN:_OFF_LEN + LENGTH_WIDTH]
    if not len_field.isdigit():
        raise MalformedEnvelope(_OFF_LEN, "payload length is not decimal")

    if _header_crc(data) != crc_field:
        raise MalformedEnvelope(_OFF_PAD, "header checksum mismatch")

    # Mirror fields must agree with the rid, the single source of truth.
    if (forced_mirror == b"1") != rid.forced:
        raise MalformedEnvelope(_OFF_FORCED, "forced mirror disagrees with rid")
    if int(trial_mirror) != rid.trial:
        raise MalformedEnvelope(_OFF_TRIAL, "trial mirror disagrees with rid")
    if svc_mirror.decode("ascii", errors="replace") != rid.service_name:
        raise MalformedEnvelope(_OFF_SVC, "service mirror disagrees with rid")

    payload_len = int(len_field)
    if len(data) != OVERHEAD_BYTES + payload_len:
        raise MalformedEnvelope(
            OVERHEAD_BYTES, f"expected {payload_len} payload bytes, got {len(data) - OVERHEAD_BYTES}"
        )
    return RequestEnvelope(
        rid=rid,
        is_forced=rid.forced,
        service_name=rid.service_name.rstrip(),
        payload=data[OVERHEAD_BYTES:],
    )


# Push frame layout: 1-byte kind tag, 87-byte rid (all zeros when absent),
# 2-byte meta code, 10-digit body length, raw body.
FRAME_HEADER_BYTES = 1 + RID_WIDTH + 2 + LENGTH_WIDTH  # 100

_FRAME_OFF_RID = 1
_FRAME_OFF_META = 1 + RID_WIDTH
_FRAME_OFF_LEN = _FRAME_OFF_META + 2

_VALID_META = {
    FrameKind.REGISTER: {META_NONE},
    FrameKind.CLOSE: {META_NONE},
    FrameKind.REGISTER_ACK: {"OK", META_UNAUTHORIZED, "NC"},
    FrameKind.DELIVER: set(_CODE_STATUSES),
}


def encode_push_frame(frame: PushFrame) -> bytes:
    if len(frame.body) > MAX_PAYLOAD:
        raise EnvelopeError(f"frame body exceeds {MAX_PAYLOAD} bytes")
    if frame.kind is FrameKind.CLOSE:
        if frame.rid is not None:
            raise EnvelopeError("Close frames carry no rid")
        rid_field = NIL_RID_FIELD.encode("ascii")
    else:
        if frame.rid is None:
            raise EnvelopeError(f"{frame.kind.value} frames require a rid")
        rid_field = _rid_canonical_bytes(frame.rid)
    meta = frame.meta if frame.meta is not None else META_NONE
    if meta not in _VALID_META[frame.kind]:
        raise EnvelopeError(f"meta {meta!r} not valid for {frame.kind.value}")
    return (
        _KIND_TAGS[frame.kind]
        + rid_field
        + meta.encode("ascii")
        + b"%0*d" % (LENGTH_WIDTH, len(frame.body))
        + frame.body
    )


def decode_push_frame(data: bytes) -> PushFrame:
    if len(data) < FRAME_HEADER_BYTES:
        raise MalformedFrame(len(data), f"frame header needs {FRAME_HEADER_BYTES} bytes, got {len(data)}")
    kind = _TAG_KINDS.get(data[:1])
    if kind is None:
        raise MalformedFrame(0, f"unknown frame kind tag {data[:1]!r}")
    rid_field = data[_FRAME_OFF_RID:_FRAME_OFF_RID + RID_WIDTH]
    if kind is FrameKind.CLOSE:
        if rid_field != NIL_RID_FIELD.encode("ascii"):
            raise MalformedFrame(_FRAME_OFF_RID, "Close frame rid slot is not nil")
        rid = None
    else:
        try:
            rid = _parse_rid_field(rid_field, _FRAME_OFF_RID)
        except MalformedEnvelope as exc:
            raise MalformedFrame(exc.offset, exc.reason) from None
    meta = data[_FRAME_OFF_META:_FRAME_OFF_META + 2].decode("ascii", errors="replace")
    if meta not in _VALID_META[kind]:
        raise MalformedFrame(_FRAME_OFF_META, f"meta {meta!r} not valid for {kind.value}")
    len_field = data[_FRAME_OFF_LEN:_FRAME_OFF_LEN + LENGTH_WIDTH]
    if not len_field.isdigit():
        raise MalformedFrame(_FRAME_OFF_LEN, "body length is not decimal")
    body_len = int(len_field)
    if len(data) != FRAME_HEADER_BYTES + body_len:
        raise MalformedFrame(
            FRAME_HEADER_BYTES, f"expected {body_len} body bytes, got {len(data) - FRAME_HEADER_BYTES}"
        )
    return PushFrame(kind, rid, None if meta == META_NONE else meta, data[FRAME_HEADER_BYTES:])
