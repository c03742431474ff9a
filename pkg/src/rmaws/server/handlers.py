"""Service handlers: named payload -> body functions with bench knobs.

Handlers are pluggable. The synthetic handler used by benchmarks and the
simulator produces a deterministic pseudo-random body of a configured
size (derived from the service name and payload), so body equality checks
are meaningful end to end; with no configured size it echoes the payload.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable


class HandlerFailure(Exception):
    """Raised by a handler to signal a service-level failure."""


def synthetic_body(service: str, payload: bytes, size: int) -> bytes:
    """Deterministic body of exactly ``size`` bytes for (service, payload)."""
    seed = hashlib.sha256(service.encode("utf-8") + b"\x00" + payload).digest()
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(seed + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:size])


@dataclass
class ServiceHandler:
    """A named service. ``delay_ms`` is scheduled by the driver, not here."""

    name: str
    fn: Callable[[bytes], bytes]
    delay_ms: int = 0

    def run(self, payload: bytes) -> bytes:
        return self.fn(payload)


def make_synthetic(
    name: str,
    *,
    output_size: int | None = None,
    delay_ms: int = 0,
    fail_times: int = 0,
) -> ServiceHandler:
    """Synthetic handler; the first ``fail_times`` invocations fail."""
    remaining = [fail_times]

    def fn(payload: bytes) -> bytes:
        if remaining[0] > 0:
            remaining[0] -= 1
            raise HandlerFailure(f"scripted failure in {name}")
        if output_size is None:
            return payload
        return synthetic_body(name, payload, output_size)

    return ServiceHandler(name=name, fn=fn, delay_ms=delay_ms)


@dataclass
class HandlerRegistry:
    _handlers: dict[str, ServiceHandler] = field(default_factory=dict)

    def add(self, handler: ServiceHandler) -> "HandlerRegistry":
        self._handlers[handler.name] = handler
        return self

    def get(self, name: str) -> ServiceHandler | None:
        return self._handlers.get(name)

    def names(self) -> list[str]:
        return sorted(self._handlers)

    @classmethod
    def from_config(cls, services: list[dict]) -> "HandlerRegistry":
        """Build a registry from config rows: name, delay_ms, output_size."""
        reg = cls()
        for row in services:
            reg.add(make_synthetic(
                row["name"],
                output_size=row.get("output_size"),
                delay_ms=int(row.get("delay_ms", 0)),
                fail_times=int(row.get("fail_times", 0)),
            ))
        return reg
