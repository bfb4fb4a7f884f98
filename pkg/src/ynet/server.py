"""HTTP query service over a trained model and a Hamming index.

Endpoints (JSON bodies unless noted):

    GET  /health            -> {"status", "entries", "k"}
    POST /query             multipart: image file, topk, include_heatmap
    POST /admin/reindex     {"dir": <gallery dir>}; 423 while one is running
    GET  /heatmap/{id}      RGBA overlay PNG of the gallery image's core map
    GET  /image/{id}        gallery thumbnail PNG
    GET  /                  static web console when a bundle dir is configured

The index reference swaps atomically on reindex; in-flight queries keep the
reference they grabbed. Port comes from YNET_PORT (default 8707).
"""

from __future__ import annotations

import base64
import email
import email.policy
import hashlib
import io
import json
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import index as index_mod
from .data import decode_image_bytes, load_dataset
from .errors import YNetError
from .hashing import HashConfig, encode, plan_aggregation
from .model import YNetParams, feature_heatmap, forward_backbone
from .nn import Tensor

DEFAULT_PORT = 8707


@dataclass
class GalleryEntry:
    image_path: Path
    label: int
    stage: Optional[float]


@dataclass
class ServiceState:
    params: YNetParams
    hash_cfg: HashConfig
    index: Optional[index_mod.HashIndex] = None
    gallery: dict[str, GalleryEntry] = field(default_factory=dict)
    web_dir: Optional[Path] = None
    reindex_lock: threading.Lock = field(default_factory=threading.Lock)
    heatmap_cache: dict[str, bytes] = field(default_factory=dict)


def default_hash_config(params: YNetParams, k: Optional[int] = None) -> HashConfig:
    cfg = params.config
    k = k or cfg.code_length
    return HashConfig(k=k, plan=plan_aggregation(k, cfg.core_channels, cfg.core_hw, cfg.core_hw))


def build_state(
    params: YNetParams,
    gallery_dir=None,
    index: Optional[index_mod.HashIndex] = None,
    k: Optional[int] = None,
    web_dir=None,
) -> ServiceState:
    state = ServiceState(params=params, hash_cfg=default_hash_config(params, k), index=index)
    if web_dir is not None:
        state.web_dir = Path(web_dir)
    if gallery_dir is not None:
        root = Path(gallery_dir)
        for s in load_dataset(root):
            state.gallery[s.id] = GalleryEntry(root / "images" / f"{s.id}.png", s.label, s.stage)
        if index is None:
            state.index = index_gallery(state, root)
    if state.index is not None and state.index.k != state.hash_cfg.k:
        raise YNetError(f"index k={state.index.k} does not match configured k={state.hash_cfg.k}")
    return state


def index_gallery(state: ServiceState, gallery_dir) -> index_mod.HashIndex:
    samples = load_dataset(gallery_dir)
    codes = []
    for s in samples:
        core = forward_backbone(state.params, Tensor(s.image.astype(state.params.stem_conv.dtype)), "eval").core
        codes.append(encode(core, state.hash_cfg))
    return index_mod.build(codes, [s.id for s in samples])


def _heatmap_png(heat: np.ndarray) -> bytes:
    """Orange overlay whose alpha follows the normalized activation."""
    h = np.clip(heat, 0.0, 1.0)
    rgba = np.zeros((*h.shape, 4), dtype=np.uint8)
    rgba[..., 0] = 255
    rgba[..., 1] = np.round(165 * h).astype(np.uint8)
    rgba[..., 3] = np.round(200 * h).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(out, format="PNG")
    return out.getvalue()


def parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    """Minimal multipart/form-data parser via the email package."""
    header = f"Content-Type: {content_type}\r\nMIME-Version: 1.0\r\n\r\n".encode()
    msg = email.message_from_bytes(header + body, policy=email.policy.default)
    if not msg.is_multipart():
        raise YNetError("expected multipart/form-data")
    fields: dict[str, bytes] = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name is None:
            continue
        payload = part.get_payload(decode=True)
        fields[str(name)] = payload if payload is not None else b""
    return fields


class ServiceHandler(BaseHTTPRequestHandler):
    state: ServiceState  # assigned on the server class
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- helpers ------------------------------------------------------------

    def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"))

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    # -- GET -----------------------------------------------------------------

    def do_GET(self) -> None:
        try:
            state = self.state
            if self.path == "/health":
                idx = state.index
                self._json(200, {"status": "ok", "entries": 0 if idx is None else len(idx), "k": state.hash_cfg.k})
            elif self.path.startswith("/heatmap/"):
                self._get_heatmap(self.path[len("/heatmap/") :])
            elif self.path.startswith("/image/"):
                self._get_image(self.path[len("/image/") :])
            elif state.web_dir is not None:
                self._get_static(self.path)
            else:
                self._error(404, "not found")
        except Exception:
            self._error(500, f"internal error (ref {uuid.uuid4().hex[:8]})")

    def _get_heatmap(self, sid: str) -> None:
        state = self.state
        entry = state.gallery.get(sid)
        if entry is None:
            self._error(404, f"unknown id {sid}")
            return
        png = state.heatmap_cache.get(sid)
        if png is None:
            image = decode_image_bytes(entry.image_path.read_bytes(), state.params.config.input_size)
            core = forward_backbone(state.params, Tensor(image.astype(state.params.stem_conv.dtype)), "eval").core
            png = _heatmap_png(feature_heatmap(core, state.params.config.input_size))
            state.heatmap_cache[sid] = png
        self._send(200, png, "image/png")

    def _get_image(self, sid: str) -> None:
        entry = self.state.gallery.get(sid)
        if entry is None or not entry.image_path.is_file():
            self._error(404, f"unknown id {sid}")
            return
        self._send(200, entry.image_path.read_bytes(), "image/png")

    def _get_static(self, path: str) -> None:
        name = "index.html" if path in ("/", "") else path.lstrip("/")
        target = (self.state.web_dir / name).resolve()
        if not str(target).startswith(str(self.state.web_dir.resolve())) or not target.is_file():
            self._error(404, "not found")
            return
        ctype = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript",
            ".css": "text/css",
            ".png": "image/png",
        }.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), ctype)

    # -- POST ----------------------------------------------------------------

    def do_POST(self) -> None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            if self.path == "/query":
                self._post_query(body)
            elif self.path == "/admin/reindex":
                self._post_reindex(body)
            else:
                self._error(404, "not found")
        except Exception:
            self._error(500, f"internal error (ref {uuid.uuid4().hex[:8]})")

    def _post_query(self, body: bytes) -> None:
        state = self.state
        idx = state.index  # grab once: reindex swaps atomically underneath us
        if idx is None:
            self._error(409, "no index loaded")
            return
        ctype = self.headers.get("Content-Type", "")
        if not ctype.startswith("multipart/form-data"):
            self._error(400, "expected multipart/form-data")
            return
        try:
            fields = parse_multipart(ctype, body)
        except Exception:
            self._error(400, "malformed multipart body")
            return
        if "image" not in fields or not fields["image"]:
            self._error(400, "missing image")
            return
        try:
            topk = int(fields.get("topk", b"10").decode("utf-8"))
        except ValueError:
            self._error(400, "topk must be an integer")
            return
        if not 1 <= topk <= 100:
            self._error(400, f"topk must be in [1,100], got {topk}")
            return
        try:
            image = decode_image_bytes(fields["image"], state.params.config.input_size)
        except Exception:
            self._error(400, "undecodable image")
            return

        include_heatmap = fields.get("include_heatmap", b"").decode("utf-8").lower() in ("1", "true", "yes")
        core = forward_backbone(state.params, Tensor(image.astype(state.params.stem_conv.dtype)), "eval").core
        code = encode(core, state.hash_cfg)
        hits = index_mod.query_topk(idx, code, topk)
        payload = {
            "query_id": hashlib.sha256(fields["image"]).hexdigest()[:12],
            "k": idx.k,
            "hits": [
                {
                    "id": sid,
                    "hamming_distance": dist,
                    "label": state.gallery[sid].label if sid in state.gallery else None,
                    "stage": state.gallery[sid].stage if sid in state.gallery else None,
                }
                for sid, dist in hits
            ],
        }
        if include_heatmap:
            heat = feature_heatmap(core, state.params.config.input_size)
            payload["heatmap_b64"] = base64.b64encode(_heatmap_png(heat)).decode("ascii")
        self._json(200, payload)

    def _post_reindex(self, body: bytes) -> None:
        state = self.state
        try:
            req = json.loads(body.decode("utf-8"))
            gallery_dir = Path(req["dir"])
        except Exception:
            self._error(400, "expected JSON body {\"dir\": ...}")
            return
        if not state.reindex_lock.acquire(blocking=False):
            self._error(423, "reindex already running")
            return
        try:
            try:
                samples = load_dataset(gallery_dir)
            except YNetError as e:
                self._error(400, str(e))
                return
            new_index = index_gallery(state, gallery_dir)
            gallery = {
                s.id: GalleryEntry(gallery_dir / "images" / f"{s.id}.png", s.label, s.stage) for s in samples
            }
            state.gallery = gallery
            state.heatmap_cache = {}
            state.index = new_index  # atomic reference swap
            self._json(200, {"entries": len(new_index)})
        finally:
            state.reindex_lock.release()


def make_server(state: ServiceState, port: int = DEFAULT_PORT, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    handler = type("BoundHandler", (ServiceHandler,), {"state": state})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(state: ServiceState, port: int, host: str = "0.0.0.0") -> None:
    server = make_server(state, port=port, host=host)
    try:
        server.serve_forever()
    finally:
        server.server_close()
