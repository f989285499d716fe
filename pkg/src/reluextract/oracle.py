"""Black-box access to a network.

Extraction code only ever sees the :class:`Oracle` interface: ``dim``,
``query``, ``query_batch`` and ``query_count``. Two transports exist: an
in-process oracle wrapping a :class:`~reluextract.network.Network`, and a TCP
client talking to :func:`serve` over the framing described below.

Wire format (all integers and floats big-endian)::

    frame    := length:u32 payload[length]
    payload  := version:u8 kind:u8 body

    request kinds
      0x01 QUERY   body = n:u32 x:f64[n]
      0x02 INFO    body = (empty)
    response kinds
      0x81 VALUE   body = y:f64
      0x82 INFO    body = dim:u32
      0xFF ERROR   body = code:u16 msg_len:u16 msg:utf8[msg_len]

    error codes: 1 malformed, 2 dimension mismatch, 3 unsupported version,
                 4 budget exhausted, 5 unknown kind

A connection carries any number of frames; requests are answered in order,
so clients may pipeline. An undecodable payload gets an ERROR response and the
connection stays open; a length above ``MAX_FRAME`` closes it.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BudgetError, InputError, ProtocolError, TransportError
from .network import Network

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 24

KIND_QUERY = 0x01
KIND_INFO = 0x02
KIND_VALUE = 0x81
KIND_INFO_REPLY = 0x82
KIND_ERROR = 0xFF

ERR_MALFORMED = 1
ERR_DIMENSION = 2
ERR_VERSION = 3
ERR_BUDGET = 4
ERR_KIND = 5

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">BB")


@dataclass
class QueryLog:
    """Thread-safe query counter with an optional hard budget."""

    count: int = 0
    budget: Optional[int] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.budget is not None and self.budget < 1:
            raise InputError("budget must be a positive integer")

    def charge(self, n: int = 1) -> None:
        with self._lock:
            if self.budget is not None and self.count + n > self.budget:
                raise BudgetError(f"query budget of {self.budget} exhausted "
                                  f"({self.count} used, {n} requested)")
            self.count += n

    @property
    def remaining(self) -> Optional[int]:
        return None if self.budget is None else self.budget - self.count


class Oracle:
    """Query interface. Subclasses implement ``_evaluate(X)`` for a batch."""

    dim: int

    def __init__(self, dim: int, budget: Optional[int] = None):
        if dim < 1:
            raise InputError("oracle dimension must be >= 1")
        self.dim = int(dim)
        self.log = QueryLog(budget=budget)

    @property
    def query_count(self) -> int:
        return self.log.count

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise InputError(f"queries must have dimension {self.dim}, got shape {X.shape}")
        return X

    def query(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InputError(f"query must have dimension {self.dim}, got shape {x.shape}")
        return float(self.query_batch(x[None, :])[0])

    def query_batch(self, X) -> np.ndarray:
        X = self._check(X)
        self.log.charge(len(X))
        return self._evaluate(X)

    def _evaluate(self, X) -> np.ndarray:
        raise NotImplementedError


class InProcessOracle(Oracle):
    """Answers queries from a network held in memory."""

    def __init__(self, net: Network, budget: Optional[int] = None):
        super().__init__(net.dim, budget)
        self._net = net

    def _evaluate(self, X):
        return np.asarray(self._net(X), dtype=float)


class NoisyOracle(Oracle):
    """Adds i.i.d. Gaussian noise of standard deviation ``noise_std`` to another oracle."""

    def __init__(self, inner: Oracle, noise_std: float = 0.0, seed=None):
        super().__init__(inner.dim)
        self.inner = inner
        self.log = inner.log
        self.noise_std = float(noise_std)
        self._rng = np.random.default_rng(seed)

    def query_batch(self, X):
        y = self.inner.query_batch(X)
        if self.noise_std > 0:
            y = y + self.noise_std * self._rng.standard_normal(y.shape)
        return y


# -- wire encoding ----------------------------------------------------------

def _frame(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def encode_query(x) -> bytes:
    x = np.asarray(x, dtype=">f8").reshape(-1)
    return _frame(_HEAD.pack(PROTOCOL_VERSION, KIND_QUERY) + _LEN.pack(x.size) + x.tobytes())


def encode_info_request() -> bytes:
    return _frame(_HEAD.pack(PROTOCOL_VERSION, KIND_INFO))


def encode_value(y: float) -> bytes:
    return _frame(_HEAD.pack(PROTOCOL_VERSION, KIND_VALUE) + struct.pack(">d", y))


def encode_info(dim: int) -> bytes:
    return _frame(_HEAD.pack(PROTOCOL_VERSION, KIND_INFO_REPLY) + _LEN.pack(dim))


def encode_error(code: int, msg: str) -> bytes:
    raw = msg.encode("utf-8")[:0xFFFF]
    return _frame(_HEAD.pack(PROTOCOL_VERSION, KIND_ERROR)
                  + struct.pack(">HH", code, len(raw)) + raw)


def decode_request(payload: bytes):
    """Return ``("query", x)`` or ``("info", None)``; raise ProtocolError(code) otherwise."""
    if len(payload) < 2:
        raise ProtocolError(ERR_MALFORMED, "payload shorter than header")
    version, kind = _HEAD.unpack_from(payload)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(ERR_VERSION, f"unsupported protocol version {version}")
    if kind == KIND_INFO:
        if len(payload) != 2:
            raise ProtocolError(ERR_MALFORMED, "INFO takes no body")
        return "info", None
    if kind != KIND_QUERY:
        raise ProtocolError(ERR_KIND, f"unknown request kind {kind:#x}")
    if len(payload) < 6:
        raise ProtocolError(ERR_MALFORMED, "QUERY missing length")
    (n,) = _LEN.unpack_from(payload, 2)
    if len(payload) != 6 + 8 * n:
        raise ProtocolError(ERR_MALFORMED, f"QUERY declares {n} floats, body has "
                                           f"{len(payload) - 6} bytes")
    return "query", np.frombuffer(payload, dtype=">f8", offset=6, count=n).astype(float)


def decode_response(payload: bytes):
    """Return the float value or the dimension; raise ProtocolError on ERROR."""
    if len(payload) < 2:
        raise ProtocolError(ERR_MALFORMED, "response shorter than header")
    version, kind = _HEAD.unpack_from(payload)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(ERR_VERSION, f"unsupported protocol version {version}")
    if kind == KIND_VALUE and len(payload) == 10:
        return struct.unpack_from(">d", payload, 2)[0]
    if kind == KIND_INFO_REPLY and len(payload) == 6:
        return _LEN.unpack_from(payload, 2)[0]
    if kind == KIND_ERROR and len(payload) >= 6:
        code, n = struct.unpack_from(">HH", payload, 2)
        raise ProtocolError(code, payload[6:6 + n].decode("utf-8", "replace"))
    raise ProtocolError(ERR_MALFORMED, f"bad response kind {kind:#x}")


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf += chunk
    return bytes(buf)


def _recv_frame(sock) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ProtocolError(ERR_MALFORMED, f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


# -- server -----------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        rfile = sock.makefile("rb")
        try:
            while True:
                head = rfile.read(4)
                if len(head) < 4:
                    return
                (n,) = _LEN.unpack(head)
                if n > MAX_FRAME:
                    sock.sendall(encode_error(ERR_MALFORMED, "frame too long"))
                    return
                payload = rfile.read(n)
                if len(payload) < n:
                    return
                sock.sendall(server.respond(payload))
        except (ConnectionError, OSError):
            return
        finally:
            rfile.close()


class OracleServer(socketserver.ThreadingTCPServer):
    """Serves ``F(x)`` for one network; never exposes parameters."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, net: Network, address=("127.0.0.1", 0), budget: Optional[int] = None):
        self.net = net
        self.log = QueryLog(budget=budget)
        try:
            super().__init__(address, _Handler)
        except OSError as exc:
            raise TransportError(f"cannot bind {address}: {exc}") from exc
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self):
        return self.server_address[:2]

    @property
    def query_count(self) -> int:
        return self.log.count

    def respond(self, payload: bytes) -> bytes:
        try:
            kind, x = decode_request(payload)
        except ProtocolError as exc:
            return encode_error(exc.args[0], exc.args[1])
        if kind == "info":
            return encode_info(self.net.dim)
        if x.size != self.net.dim:
            return encode_error(ERR_DIMENSION, f"expected {self.net.dim} coordinates, got {x.size}")
        try:
            self.log.charge(1)
        except BudgetError as exc:
            return encode_error(ERR_BUDGET, str(exc))
        return encode_value(self.net(x))

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name="oracle-server")
        self._thread.start()
        log.info("oracle server listening on %s:%d", *self.address)
        return self

    def close(self) -> None:
        if self._thread is not None:
            self.shutdown()
            self._thread.join()
            self._thread = None
        self.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(net: Network, address=("127.0.0.1", 0), budget: Optional[int] = None) -> OracleServer:
    """Start a background server and return its handle (use as a context manager)."""
    if isinstance(address, str):
        address = parse_address(address)
    return OracleServer(net, address, budget).start()


def parse_address(addr: str):
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise InputError(f"address must look like HOST:PORT, got {addr!r}")
    return (host or "127.0.0.1", int(port))


# -- client -----------------------------------------------------------------

class WireOracle(Oracle):
    """Oracle speaking the wire protocol to a remote :class:`OracleServer`.

    ``query_batch`` pipelines one QUERY frame per row and reads the answers in
    order; each row counts as one query.
    """

    def __init__(self, address, budget: Optional[int] = None, timeout: float = 30.0,
                 pipeline: int = 512):
        if isinstance(address, str):
            address = parse_address(address)
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._pipeline = pipeline
        with self._lock:
            self._sock.sendall(encode_info_request())
            dim = decode_response(self._recv())
        super().__init__(dim, budget)

    def _recv(self) -> bytes:
        try:
            return _recv_frame(self._sock)
        except (OSError, EOFError) as exc:
            raise TransportError(f"connection lost: {exc}") from exc

    def _evaluate(self, X):
        out = np.empty(len(X))
        with self._lock:
            for start in range(0, len(X), self._pipeline):
                block = X[start:start + self._pipeline]
                try:
                    self._sock.sendall(b"".join(encode_query(x) for x in block))
                except OSError as exc:
                    raise TransportError(f"send failed: {exc}") from exc
                err = None
                for i in range(len(block)):
                    try:
                        out[start + i] = decode_response(self._recv())
                    except ProtocolError as exc:
                        err = err or exc
                if err is not None:
                    if err.args[0] == ERR_BUDGET:
                        raise BudgetError(err.args[1])
                    raise err
        return out

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
