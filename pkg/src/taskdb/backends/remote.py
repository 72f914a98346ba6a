"""Client for API-registered models, plus a mock server speaking the same wire format.

Wire format (request and response): ``b"MVB1" | count:u32 | (len:u64 | Mvec frame) * count``,
sent as the body of an HTTP POST.
"""

from __future__ import annotations

import hashlib
import os
import socket
import struct
import threading
import time
import urllib.error
import urllib.request
from collections import OrderedDict, deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import TYPE_CHECKING, Callable, Sequence

from taskdb.errors import CorruptFrame, QuotaExhausted, Timeout, TransportError
from taskdb.tensor import Mvec, mvec_deserialize, mvec_serialize

if TYPE_CHECKING:  # the catalog imports this package for its cost types
    from taskdb.model_repo import ApiModelSpec

ENVELOPE_MAGIC = b"MVB1"
_ENV_HEAD = struct.Struct("<4sI")
_LEN = struct.Struct("<Q")

BACKOFF_BASE = 0.05


def encode_envelope(rows: Sequence[Mvec]) -> bytes:
    parts = [_ENV_HEAD.pack(ENVELOPE_MAGIC, len(rows))]
    for row in rows:
        frame = mvec_serialize(row)
        parts += [_LEN.pack(len(frame)), frame]
    return b"".join(parts)


def decode_envelope(body: bytes) -> list[Mvec]:
    if len(body) < _ENV_HEAD.size:
        raise CorruptFrame("truncated batch envelope")
    magic, count = _ENV_HEAD.unpack_from(body, 0)
    if magic != ENVELOPE_MAGIC:
        raise CorruptFrame(f"bad envelope magic {magic!r}")
    pos, rows = _ENV_HEAD.size, []
    for _ in range(count):
        if len(body) - pos < _LEN.size:
            raise CorruptFrame("truncated batch envelope")
        (n,) = _LEN.unpack_from(body, pos)
        pos += _LEN.size
        if len(body) - pos < n:
            raise CorruptFrame("truncated batch envelope")
        rows.append(mvec_deserialize(body[pos:pos + n]))
        pos += n
    if pos != len(body):
        raise CorruptFrame("trailing bytes after batch envelope")
    return rows


def _is_timeout(exc: BaseException) -> bool:
    if isinstance(exc, (socket.timeout, TimeoutError)):
        return True
    return isinstance(exc, urllib.error.URLError) and isinstance(exc.reason, (socket.timeout, TimeoutError))


class RemoteClient:
    """Retrying, quota-limited, caching caller for one API model.

    ``sleep`` and ``clock`` are injectable so tests can observe backoff
    without waiting on it.
    """

    def __init__(self, spec: ApiModelSpec, credentials: Callable[[str], str | None] = os.environ.get,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic,
                 cache_size: int = 1024):
        self.spec = spec
        self._credentials = credentials
        self._sleep = sleep
        self._clock = clock
        self._cache: OrderedDict[str, tuple[float, list[Mvec]]] = OrderedDict()
        self._cache_size = cache_size
        self._calls: deque[float] = deque()
        self._lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0
        self.backoffs: list[float] = []

    def _take_quota(self) -> None:
        with self._lock:
            now = self._clock()
            while self._calls and now - self._calls[0] >= self.spec.quota_window:
                self._calls.popleft()
            if len(self._calls) >= self.spec.quota:
                raise QuotaExhausted(f"{self.spec.endpoint}: {self.spec.quota} requests per "
                                     f"{self.spec.quota_window:g}s window used")
            self._calls.append(now)
            self.network_calls += 1

    def _cached(self, key: str) -> list[Mvec] | None:
        with self._lock:
            hit = self._cache.get(key)
            if hit is None:
                return None
            stamp, rows = hit
            if self._clock() - stamp > self.spec.cache_ttl:
                del self._cache[key]
                return None
            self._cache.move_to_end(key)
            self.cache_hits += 1
            return rows

    def _store(self, key: str, rows: list[Mvec]) -> None:
        with self._lock:
            self._cache[key] = (self._clock(), rows)
            self._cache.move_to_end(key)
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.spec.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/x-taskdb-mvec-batch"})
        if self.spec.auth_ref:
            token = self._credentials(self.spec.auth_ref)
            if token:
                req.add_header("Authorization", f"Bearer {token}")
        with urllib.request.urlopen(req, timeout=self.spec.timeout) as resp:
            return resp.read()

    def invoke(self, rows: Sequence[Mvec]) -> list[Mvec]:
        body = encode_envelope(rows)
        key = hashlib.sha256(body).hexdigest()
        cached = self._cached(key)
        if cached is not None:
            return list(cached)
        timeouts = 0
        last: BaseException | None = None
        attempts = self.spec.max_retries + 1
        for attempt in range(attempts):
            if attempt:
                delay = BACKOFF_BASE * 2 ** (attempt - 1)
                self.backoffs.append(delay)
                self._sleep(delay)
            self._take_quota()
            try:
                out = decode_envelope(self._post(body))
            except CorruptFrame as exc:
                last = exc
            except Exception as exc:  # noqa: BLE001 - classified below
                if _is_timeout(exc):
                    timeouts += 1
                last = exc
            else:
                if len(out) != len(rows):
                    last = TransportError(f"sent {len(rows)} rows, received {len(out)}")
                    continue
                self._store(key, out)
                return list(out)
        if timeouts == attempts:
            raise Timeout(f"{self.spec.endpoint}: all {attempts} attempts exceeded {self.spec.timeout:g}s")
        raise TransportError(f"{self.spec.endpoint}: failed after {attempts} attempts: {last}") from last


_clients: dict[ApiModelSpec, RemoteClient] = {}
_clients_lock = threading.Lock()


def client_for(spec: ApiModelSpec) -> RemoteClient:
    with _clients_lock:
        if spec not in _clients:
            _clients[spec] = RemoteClient(spec)
        return _clients[spec]


def remote_invoke(spec: ApiModelSpec, payload: Sequence[Mvec]) -> list[Mvec]:
    """Invoke an API model; quota and cache state is shared per spec within the process."""
    return client_for(spec).invoke(payload)


class MockRemoteServer:
    """In-process HTTP server implementing the batch envelope protocol.

    Each row is returned as ``scale * row``. ``fail_first`` requests answer
    503 and ``delay`` seconds are slept before every response.
    """

    def __init__(self, scale: float = 1.0, fail_first: int = 0, delay: float = 0.0, token: str | None = None):
        self.scale = scale
        self.fail_first = fail_first
        self.delay = delay
        self.token = token
        self.calls = 0
        self._lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/infer"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                with server._lock:
                    server.calls += 1
                    n = server.calls
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                if server.delay:
                    time.sleep(server.delay)
                if server.token and self.headers.get("Authorization") != f"Bearer {server.token}":
                    return self._reply(401, b"unauthorized")
                if n <= server.fail_first:
                    return self._reply(503, b"unavailable")
                try:
                    rows = decode_envelope(body)
                except CorruptFrame as exc:
                    return self._reply(400, str(exc).encode())
                out = [Mvec(r.shape, r.data * server.scale) for r in rows]
                self._reply(200, encode_envelope(out))

            def _reply(self, code: int, payload: bytes):
                try:
                    self.send_response(code)
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        return Handler

    def start(self) -> "MockRemoteServer":
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> "MockRemoteServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
