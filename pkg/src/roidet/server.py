"""Localhost HTTP endpoint for the browser annotator.

Endpoints:
  GET  /manifest     -> {"images": [{id, url, width, height}]}
  GET  /image/{id}   -> raw image bytes
  GET  /annotations  -> current annotation file bytes
  POST /annotations  -> validate, write atomically, reply 204

The posted bytes are stored verbatim (after validation), so a GET
returns exactly what was saved.  No CORS headers are emitted: the
annotator UI must be served from this same origin, which the optional
`ui_dir` provides.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .dataset import AnnotationError, load_annotations, parse_annotations

_CONTENT_TYPES = {
    ".png": "image/png",
    ".pgm": "image/x-portable-graymap",
    ".ppm": "image/x-portable-pixmap",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".map": "application/json",
}


class AnnotatorState:
    """Shared handler state: annotation file path, image roots, UI dir."""

    def __init__(self, annotations_path, images_dir=None, ui_dir=None):
        self.annotations_path = Path(annotations_path)
        self.images_dir = Path(images_dir) if images_dir else self.annotations_path.parent
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.lock = threading.Lock()

    def document(self):
        return load_annotations(self.annotations_path)

    def image_path(self, image_id: str) -> Path | None:
        for im in self.document().images:
            if im.id == image_id:
                p = Path(im.file)
                return p if p.is_absolute() else self.images_dir / p
        return None

    def save_raw(self, raw: bytes) -> None:
        # validate before replacing anything
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise AnnotationError(f"body is not valid JSON: {e}") from e
        parse_annotations(obj)
        with self.lock:
            fd, tmp = tempfile.mkstemp(dir=self.annotations_path.parent,
                                       prefix=".annotations-", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(raw)
                os.replace(tmp, self.annotations_path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


class _Handler(BaseHTTPRequestHandler):
    state: AnnotatorState  # injected by make_server

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send(self, code: int, body: bytes = b"", ctype: str = "application/json"):
        self.send_response(code)
        if body:
            self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _send_error(self, code: int, message: str):
        self._send(code, json.dumps({"error": message}).encode("utf-8"))

    def do_GET(self):
        try:
            if self.path == "/manifest":
                doc = self.state.document()
                manifest = {"images": [
                    {"id": im.id, "url": f"/image/{im.id}",
                     "width": im.width, "height": im.height}
                    for im in doc.images
                ]}
                self._send(200, json.dumps(manifest).encode("utf-8"))
            elif self.path.startswith("/image/"):
                image_id = self.path[len("/image/"):]
                p = self.state.image_path(image_id)
                if p is None or not p.exists():
                    self._send_error(404, f"unknown image {image_id!r}")
                    return
                ctype = _CONTENT_TYPES.get(p.suffix.lower(), "application/octet-stream")
                self._send(200, p.read_bytes(), ctype)
            elif self.path == "/annotations":
                self._send(200, self.state.annotations_path.read_bytes())
            else:
                self._serve_static()
        except Exception as e:  # pragma: no cover - defensive
            self._send_error(500, str(e))

    def _serve_static(self):
        if self.state.ui_dir is None:
            self._send_error(404, f"no resource at {self.path}")
            return
        rel = self.path.lstrip("/") or "index.html"
        p = (self.state.ui_dir / rel).resolve()
        if not str(p).startswith(str(self.state.ui_dir.resolve())) or not p.is_file():
            self._send_error(404, f"no resource at {self.path}")
            return
        ctype = _CONTENT_TYPES.get(p.suffix.lower(), "application/octet-stream")
        self._send(200, p.read_bytes(), ctype)

    def do_POST(self):
        if self.path != "/annotations":
            self._send_error(404, f"no resource at {self.path}")
            return
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            self.state.save_raw(raw)
        except AnnotationError as e:
            self._send_error(400, str(e))
            return
        self._send(204)


def make_server(annotations_path, images_dir=None, ui_dir=None,
                host: str = "127.0.0.1", port: int = 8731) -> ThreadingHTTPServer:
    """Build (but do not start) the annotator HTTP server."""
    state = AnnotatorState(annotations_path, images_dir, ui_dir)
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer((host, port), handler)


def serve_annotator(annotations_path, images_dir=None, ui_dir=None,
                    host: str = "127.0.0.1", port: int = 8731) -> None:
    """Run the annotator endpoint until interrupted."""
    server = make_server(annotations_path, images_dir, ui_dir, host, port)
    print(f"annotator endpoint on http://{host}:{port}/ "
          f"(annotations: {annotations_path})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
