"""Request/response control messages over the broker frame format.

A request is a frame whose body is a UTF-8 JSON object
``{"id": n, "verb": "...", "body": {...}}``; the reply carries the same id
with either ``"result"`` or ``"error"``. In single-process runs the same
verbs are plain method calls on ``ControlService.handle``.
"""
from __future__ import annotations

import itertools
import json
import logging
from typing import Any, Callable, Dict, Optional

from .broker import AccessToken, frame, split_frames
from .cloud import CLOUD_ID
from .domain import DataQuery, GeoPoint, GeoRegion, ProducerDescriptor, SlaContract
from .edge import EdgeConfig

logger = logging.getLogger(__name__)

CLOUD_VERBS = ("REGISTER_EDGE", "DISCOVER", "REGISTER_FLOW", "DEREGISTER_FLOW", "QUERY",
               "OPEN_SESSION", "CLOSE_SESSION", "BILLING")
EDGE_VERBS = ("DEPLOY_PIPELINE", "RETIRE_PIPELINE", "ATTACH_FLOWS", "DETACH_FLOWS")


class ControlError(Exception):
    """Raised client-side when the service answers with an error."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def encode_message(msg: dict) -> bytes:
    return json.dumps(msg, separators=(",", ":"), sort_keys=True).encode("utf-8")


def decode_message(data: bytes) -> dict:
    msg = json.loads(data.decode("utf-8"))
    if not isinstance(msg, dict) or "id" not in msg:
        raise ValueError("control message without id")
    return msg


def request_frame(request_id: int, verb: str, body: Optional[dict] = None) -> bytes:
    return frame(encode_message({"id": request_id, "verb": verb, "body": body or {}}))


class ControlService:
    """Dispatches control verbs to a ``Platform``.

    Tokens cross the wire as their ids; the service keeps the objects.
    """

    def __init__(self, platform):
        self.platform = platform
        self.tokens: Dict[str, AccessToken] = {}
        self._handlers: Dict[str, Callable[..., Any]] = {
            "REGISTER_EDGE": self._register_edge,
            "DISCOVER": self._discover,
            "REGISTER_FLOW": self._register_flow,
            "DEREGISTER_FLOW": self._deregister_flow,
            "QUERY": self._query,
            "OPEN_SESSION": self._open_session,
            "CLOSE_SESSION": self._close_session,
            "BILLING": self._billing,
        }

    @property
    def cloud(self):
        return self.platform.cloud

    def handle(self, verb: str, body: dict, device=None) -> dict:
        if verb in EDGE_VERBS:
            host_id = body.get("host", CLOUD_ID)
            return self.cloud.host(host_id).handle_control(verb, body)
        fn = self._handlers.get(verb)
        if fn is None:
            raise ValueError(f"unknown control verb {verb}")
        if verb == "REGISTER_FLOW":
            return fn(body, device)
        return fn(body)

    def handle_frame(self, data: bytes, device=None) -> bytes:
        """Decode one request body, dispatch it and return the encoded reply body."""
        try:
            msg = decode_message(data)
        except (ValueError, UnicodeDecodeError) as exc:
            return encode_message({"id": None, "error": {"kind": "BadRequest", "message": str(exc)}})
        try:
            result = self.handle(msg.get("verb", ""), msg.get("body") or {}, device)
            reply = {"id": msg["id"], "result": result}
        except Exception as exc:  # reported to the caller, not raised in the server
            logger.debug("control %s failed: %s", msg.get("verb"), exc)
            reply = {"id": msg["id"], "error": {"kind": type(exc).__name__, "message": str(exc)}}
        return encode_message(reply)

    def _keep(self, token: AccessToken) -> str:
        self.tokens[token.token_id] = token
        return token.token_id

    # -- verbs --------------------------------------------------------------
    def _register_edge(self, body):
        cfg = EdgeConfig(body["edge_id"], GeoRegion.from_dict(body["serving_area"]),
                         capacity=float(body.get("capacity", 36.0)), endpoint=body.get("endpoint", ""))
        return {"edge_id": self.platform.add_edge(cfg).edge_id}

    def _discover(self, body):
        d = self.cloud.discover(GeoPoint.from_dict(body["position"]))
        return {"host_id": d.host_id, "endpoint": d.endpoint}

    def _register_flow(self, body, device):
        flow = self.cloud.register_flow(ProducerDescriptor.from_dict(body["producer"]), device=device)
        host, topic, token = self.cloud.attachment(flow.pseudo_id)
        return {"flow": flow.to_dict(), "host_id": host.name, "topic": topic, "token": self._keep(token)}

    def _deregister_flow(self, body):
        self.cloud.deregister_flow(body["pseudo_id"])
        return {}

    def _query(self, body):
        flows = self.cloud.resolve_query(DataQuery.from_dict(body["query"]))
        return {"flows": [f.to_dict() for f in sorted(flows, key=lambda f: f.pseudo_id)]}

    def _open_session(self, body):
        s = self.cloud.open_session(DataQuery.from_dict(body["query"]), SlaContract.from_dict(body["sla"]),
                                    consumer_host=body.get("consumer_host"))
        return {"session_id": s.session_id, "consumer_topic": s.consumer_topic,
                "consumer_host": s.consumer_host, "token": self._keep(s.token),
                "matched_flows": sorted(s.matched_flows), "created_ts": s.created_ts}

    def _close_session(self, body):
        return self.cloud.close_session(body["session_id"]).to_dict()

    def _billing(self, body):
        window = body.get("window")
        return self.cloud.billing_report(body["consumer_id"], tuple(window) if window else None).to_dict()


class FrameClient:
    """Blocking request/response client over a connected stream socket."""

    def __init__(self, sock):
        self.sock = sock
        self._ids = itertools.count(1)
        self._buf = bytearray()
        self.unsolicited = []

    def call(self, verb: str, body: Optional[dict] = None) -> dict:
        rid = next(self._ids)
        self.sock.sendall(request_frame(rid, verb, body))
        while True:
            for data in self._next_frames():
                msg = decode_message(data)
                if msg.get("id") != rid:
                    self.unsolicited.append(msg)
                    continue
                if "error" in msg:
                    raise ControlError(msg["error"]["kind"], msg["error"]["message"])
                return msg["result"]

    def _next_frames(self):
        while True:
            frames = split_frames(self._buf)
            if frames:
                return frames
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("control connection closed")
            self._buf.extend(chunk)
