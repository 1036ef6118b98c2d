"""Protocol-adaptation gateway and its data pool.

Two operating modes share one ingest interface. The adapting mode
converts every binary report to canonical JSON once, on arrival, so
queries only ever touch JSON. The pass-through mode stores payloads
verbatim and pays the conversion price on every query that touches a
binary record. Costs are modelled in milliseconds per document.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterable, Sequence

from . import cbor
from .errors import DecodeError, UnsupportedItem
from .fleet import Envelope
from .model import CostModel, Encoding, canonical_json


class GatewayMode(str, Enum):
    QCSM = "QCSM"
    BASELINE = "Baseline"


@dataclass(frozen=True, slots=True)
class DataPoolRecord:
    """One ingested report. Exactly one of document/raw_payload is set."""

    source_id: int
    service: str
    document: str | None
    raw_payload: bytes | None
    original_encoding: Encoding
    ingested_cycle: int


@dataclass(frozen=True, slots=True)
class QueryResult:
    documents: list[str]
    response_time_ms: float


class DataPool:
    """Append-only record log; appends and counters are lock-protected."""

    def __init__(self) -> None:
        self._records: list[DataPoolRecord] = []
        self._lock = threading.Lock()
        self.rejected = 0
        self.ingest_cost_ms = 0.0

    def append(self, record: DataPoolRecord, cost_ms: float) -> None:
        with self._lock:
            self._records.append(record)
            self.ingest_cost_ms += cost_ms

    def count_rejection(self) -> None:
        with self._lock:
            self.rejected += 1

    def snapshot(self) -> list[DataPoolRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


class Gateway:
    """Ingests wire envelopes into a data pool and serves queries on it."""

    def __init__(self, mode: GatewayMode, cost: CostModel | None = None):
        self.mode = mode
        self.cost = cost or CostModel()
        self.pool = DataPool()

    # Ingest -----------------------------------------------------------

    def handle_message(self, envelope: Envelope) -> DataPoolRecord:
        """Validate, adapt if in adapting mode, and store one report.

        Malformed or out-of-subset payloads are counted as rejections
        and the error propagates to the caller.
        """
        envelope.check()
        try:
            record, cost_ms = self._ingest(envelope)
        except (DecodeError, UnsupportedItem, ValueError):
            self.pool.count_rejection()
            raise
        self.pool.append(record, cost_ms)
        return record

    def _ingest(self, envelope: Envelope) -> tuple[DataPoolRecord, float]:
        cost = self.cost
        if envelope.encoding is Encoding.CBOR:
            value = cbor.decode(envelope.payload)
            if self.mode is GatewayMode.QCSM:
                document = canonical_json(value)
                return self._record(envelope, document=document), cost.c_parse_cbor + cost.c_convert
            return self._record(envelope, raw=envelope.payload), cost.c_parse_cbor
        # JSON on the wire.
        text = envelope.payload.decode("utf-8")
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DecodeError(f"invalid JSON payload: {exc.msg}", exc.pos) from exc
        if self.mode is GatewayMode.QCSM:
            return self._record(envelope, document=canonical_json(value)), cost.c_parse_json
        return self._record(envelope, raw=envelope.payload), cost.c_parse_json

    def _record(
        self, envelope: Envelope, document: str | None = None, raw: bytes | None = None
    ) -> DataPoolRecord:
        return DataPoolRecord(
            source_id=envelope.source_id,
            service=envelope.service,
            document=document,
            raw_payload=raw,
            original_encoding=envelope.encoding,
            ingested_cycle=envelope.emitted_cycle,
        )

    # Query ------------------------------------------------------------

    def query(
        self,
        service: str | None = None,
        window: tuple[int, int] | None = None,
    ) -> QueryResult:
        """Return matching records as JSON documents plus the modelled time.

        `service` of None matches everything; `window` is an inclusive
        cycle range on ingestion time. In pass-through mode every
        matched binary record is decoded and converted on the fly, and
        the response time reflects that.
        """
        cost = self.cost
        elapsed = cost.c_query_base
        documents: list[str] = []
        for record in self.pool.snapshot():
            if service is not None and record.service != service:
                continue
            if window is not None and not window[0] <= record.ingested_cycle <= window[1]:
                continue
            if record.document is not None:
                documents.append(canonical_json(json.loads(record.document)))
                elapsed += cost.c_parse_json
            elif record.original_encoding is Encoding.CBOR:
                documents.append(canonical_json(cbor.decode(record.raw_payload)))
                elapsed += cost.c_parse_cbor + cost.c_convert
            else:
                documents.append(canonical_json(json.loads(record.raw_payload.decode("utf-8"))))
                elapsed += cost.c_parse_json
        return QueryResult(documents=documents, response_time_ms=elapsed)

    # Inspection ---------------------------------------------------------

    def dump_ndjson(self) -> str:
        """One canonical JSON object per record, newline-delimited."""
        lines = []
        for record in self.pool.snapshot():
            entry: dict[str, Any] = {
                "source_id": record.source_id,
                "service": record.service,
                "original_encoding": record.original_encoding.value,
                "ingested_cycle": record.ingested_cycle,
            }
            if record.document is not None:
                entry["document"] = json.loads(record.document)
            else:
                entry["raw_payload_b64"] = base64.b64encode(record.raw_payload).decode("ascii")
            lines.append(canonical_json(entry))
        return "\n".join(lines) + ("\n" if lines else "")

    def stats(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "records": len(self.pool),
            "rejected": self.pool.rejected,
            "ingest_cost_ms": self.pool.ingest_cost_ms,
        }


def ingest_all(gateways: Sequence[Gateway], envelopes: Iterable[Envelope]) -> int:
    """Feed one traffic batch to several gateways; returns rejection count."""
    rejected = 0
    for envelope in envelopes:
        for gw in gateways:
            try:
                gw.handle_message(envelope)
            except (DecodeError, UnsupportedItem):
                rejected += 1
    return rejected


def serve_pool(gateway: Gateway, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Expose the pool over HTTP: `/` is the ndjson dump, `/stats` is JSON.

    Returns a started server; callers own shutdown.
    """

    class PoolHandler(BaseHTTPRequestHandler):
        def do_GET(self) -> None:  # noqa: N802 (http.server API)
            if self.path == "/stats":
                body = canonical_json(gateway.stats()).encode("utf-8")
                content_type = "application/json"
            elif self.path == "/":
                body = gateway.dump_ndjson().encode("utf-8")
                content_type = "application/x-ndjson"
            else:
                self.send_error(404)
                return
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt: str, *args: Any) -> None:
            pass

    server = ThreadingHTTPServer((host, port), PoolHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
