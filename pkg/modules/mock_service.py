# modules/mock_service.py
"""A stand-in generation service for local runs and tests.

POST /generate takes the multipart job request and answers with a PNG: the
uploaded control image in ``echo`` mode, a flat placeholder in ``placeholder``
mode, or plain text in ``broken`` mode. With ``max_requests`` set, the server
drops the next connection after that many answers and shuts itself down.

    python -m modules.mock_service --port 8188
"""
import argparse
import io
import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

MODES = ("echo", "placeholder", "broken")


_BOUNDARY = re.compile(r'boundary="?([^";]+)"?')
_DISPOSITION_PARAM = re.compile(r';\s*(name|filename)="([^"]*)"')


def parse_multipart(content_type, body):
    """Map of form field name -> (filename or None, payload bytes).

    The body is split on the boundary named in ``content_type``. Each part is a
    header block, a blank line, then the payload up to the CRLF before the next
    boundary.
    """
    match = _BOUNDARY.search(content_type)
    if not content_type.lower().startswith("multipart/form-data") or match is None:
        raise ValueError(f"expected multipart/form-data with a boundary, got {content_type!r}")
    delimiter = b"--" + match.group(1).encode("latin-1")
    chunks = body.split(delimiter)
    if len(chunks) < 3 or not chunks[-1].startswith(b"--"):
        raise ValueError("multipart body is not closed by its boundary")

    fields = {}
    for chunk in chunks[1:-1]:
        if not chunk.startswith(b"\r\n") or not chunk.endswith(b"\r\n"):
            raise ValueError("multipart part is not framed by CRLF")
        head, sep, payload = chunk[2:-2].partition(b"\r\n\r\n")
        if not sep:
            raise ValueError("multipart part has no header block")
        params = {}
        for line in head.decode("latin-1").split("\r\n"):
            key, _, value = line.partition(":")
            if key.strip().lower() == "content-disposition":
                params = dict(_DISPOSITION_PARAM.findall(value))
        if "name" not in params:
            raise ValueError("multipart part has no field name")
        fields[params["name"]] = (params.get("filename"), payload)
    return fields


def placeholder_png(size, seed=0):
    width, height = size
    shade = int(np.random.default_rng(seed % (2 ** 32)).integers(40, 200))
    buffer = io.BytesIO()
    Image.new("RGB", (int(width), int(height)), (shade, shade, shade)).save(buffer, format="PNG")
    return buffer.getvalue()


class _Handler(BaseHTTPRequestHandler):
    service = None  # set per server subclass

    def log_message(self, format, *args):
        logger.debug("mock %s - %s", self.address_string(), format % args)

    def do_GET(self):
        if self.path.rstrip("/") == "/health":
            self._reply(200, b'{"status": "ok"}', "application/json")
        else:
            self._reply(404, b"not found", "text/plain")

    def do_POST(self):
        if self.path.rstrip("/") != "/generate":
            self._reply(404, b"not found", "text/plain")
            return
        service = self.service
        if not service.admit():
            # simulated crash: no answer on this connection, then stop listening
            self.close_connection = True
            service.stop_async()
            return

        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        try:
            fields = parse_multipart(self.headers.get("Content-Type", ""), body)
            job = json.loads(fields["job"][1])
        except (KeyError, ValueError) as e:
            self._reply(400, f"bad request: {e}".encode(), "text/plain")
            return

        if service.mode == "broken":
            payload, ctype = b"not an image", "text/plain"
        elif service.mode == "echo" and "control_image" in fields:
            payload, ctype = fields["control_image"][1], "image/png"
        else:
            payload, ctype = placeholder_png(job.get("output_size", (64, 64)), job.get("seed", 0)), "image/png"
        service.record(job["job_id"])
        self._reply(200, payload, ctype)

    def _reply(self, status, payload, ctype):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


class MockGenerationService:
    def __init__(self, host="127.0.0.1", port=0, mode="echo", max_requests=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.max_requests = max_requests
        self.served_job_ids = []
        self._admitted = 0
        self._lock = threading.Lock()
        handler = type("Handler", (_Handler,), {"service": self})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread = None
        self._stopped = False

    @property
    def url(self):
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def admit(self):
        with self._lock:
            if self.max_requests is not None and self._admitted >= self.max_requests:
                return False
            self._admitted += 1
            return True

    def record(self, job_id):
        with self._lock:
            self.served_job_ids.append(job_id)

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.info("mock generation service listening on %s mode=%s", self.url, self.mode)
        return self

    def stop(self):
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
        if self._thread is not None:
            self._server.shutdown()
        self._server.server_close()

    def stop_async(self):
        threading.Thread(target=self.stop, daemon=True).start()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    parser = argparse.ArgumentParser(description="Mock generation service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8188)
    parser.add_argument("--mode", choices=MODES, default="echo")
    parser.add_argument("--max-requests", type=int, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    service = MockGenerationService(args.host, args.port, args.mode, args.max_requests)
    service.start()
    try:
        service._thread.join()
    except KeyboardInterrupt:
        service.stop()


if __name__ == "__main__":
    main()
