"""Client/server split inference over the frame protocol.

The client runs the encoder and quantizer and sends packed indices; the
server unpacks, reconstructs and runs the decoder, then answers with the
decoder output.  A session opens with a HELLO that fixes ``K`` and the tensor
shape; after that each FEATURES frame gets exactly one RESPONSE or ERROR
(stop-and-wait).  Malformed or invalid input is answered with an ERROR frame
and never takes the server down.

``Loopback`` runs the same server session in-process, passing real encoded
bytes, so tests can exercise the protocol without sockets.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .baseline import densify_rows, sparsify_rows
from .codec import ErrorCode, FrameError, FrameType
from .quantizer import QuantizerConfig, QuantizedBlock, Scaling, quantize, reconstruct, scale
from .tensor import as_features
from .training import mlp_forward

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class Loopback:
    pass


@dataclass(frozen=True)
class Tcp:
    host: str = "127.0.0.1"
    port: int = 0


@dataclass(frozen=True)
class SessionConfig:
    K: int
    shape: tuple[int, ...] | None = None
    transport: Loopback | Tcp = field(default_factory=Loopback)
    timeout: float = DEFAULT_TIMEOUT
    scaling: Scaling = Scaling.CLIPPED_LINEAR

    def __post_init__(self):
        if not 2 <= self.K <= 1 << codec.MAX_PACK_WIDTH:
            raise ValueError(f"K must be in [2, {1 << codec.MAX_PACK_WIDTH}], got {self.K}")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(self.K, self.scaling)

    @property
    def bit_width(self) -> int:
        return codec.bits_for_levels(self.K)


@dataclass
class TransferLog:
    frames_sent: int = 0
    payload_bytes: int = 0
    overhead_bytes: int = 0
    raw_fp16_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.overhead_bytes

    @property
    def achieved_ratio(self) -> float:
        return self.raw_fp16_bytes / self.total_bytes if self.total_bytes else 0.0

    def to_text(self) -> str:
        return (f"frames_sent={self.frames_sent}\npayload_bytes={self.payload_bytes}\n"
                f"overhead_bytes={self.overhead_bytes}\ntotal_bytes={self.total_bytes}\n"
                f"raw_fp16_bytes={self.raw_fp16_bytes}\nachieved_ratio={self.achieved_ratio:.6f}\n")


class SplitError(Exception):
    pass


class TransportError(SplitError, ConnectionError):
    pass


class SplitTimeout(SplitError, TimeoutError):
    pass


class ServerError(SplitError):
    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


# -- server --------------------------------------------------------------------

class ServerSession:
    """Per-connection protocol state.  Not shared between connections."""

    def __init__(self, cfg: SessionConfig, decoder):
        self.cfg = cfg
        self.decoder = decoder
        self.negotiated: codec.Hello | None = None
        self.received_types: list[FrameType] = []

    def handle_bytes(self, raw: bytes) -> bytes:
        try:
            frame = codec.decode_frame(raw)
        except FrameError as exc:
            return codec.encode_frame(codec.Error(ErrorCode.MALFORMED, str(exc)))
        return codec.encode_frame(self.handle(frame))

    def handle(self, frame):
        self.received_types.append(codec._TYPE_OF[type(frame)])
        try:
            if isinstance(frame, codec.Hello):
                return self._hello(frame)
            if isinstance(frame, codec.Features):
                return self._features(frame)
            return codec.Error(ErrorCode.PROTOCOL, f"unexpected {type(frame).__name__} frame")
        except Exception as exc:  # a bad request must never kill the session
            log.exception("request failed")
            return codec.Error(ErrorCode.INTERNAL, f"internal error: {exc}")

    def _hello(self, f: codec.Hello):
        if f.protocol_version != codec.PROTOCOL_VERSION:
            return codec.Error(ErrorCode.HANDSHAKE, f"unsupported protocol version {f.protocol_version}")
        if f.K != self.cfg.K:
            return codec.Error(ErrorCode.HANDSHAKE, f"K mismatch: server uses {self.cfg.K}, client sent {f.K}")
        if self.cfg.shape is not None and tuple(f.shape) != self.cfg.shape:
            return codec.Error(ErrorCode.SHAPE_MISMATCH, f"shape {tuple(f.shape)} != expected {self.cfg.shape}")
        if tuple(f.shape)[-1] != self.decoder[0].in_dim:
            return codec.Error(ErrorCode.SHAPE_MISMATCH, "feature dims do not match the decoder")
        self.negotiated = f
        return codec.Hello(K=self.cfg.K, shape=tuple(f.shape))

    def _features(self, f: codec.Features):
        if self.negotiated is None:
            return codec.Error(ErrorCode.PROTOCOL, "features before hello")
        if f.K != self.negotiated.K:
            return codec.Error(ErrorCode.PROTOCOL, f"K changed mid-session ({self.negotiated.K} -> {f.K})")
        if tuple(f.shape) != tuple(self.negotiated.shape):
            return codec.Error(ErrorCode.SHAPE_MISMATCH, f"shape {tuple(f.shape)} != negotiated")
        if f.packed.bit_width != codec.bits_for_levels(f.K):
            return codec.Error(ErrorCode.PROTOCOL, f"bit width {f.packed.bit_width} does not match K={f.K}")
        try:
            block = QuantizedBlock(K=f.K, shape=f.shape, indices=codec.unpack(f.packed))
            c = reconstruct(block)
        except ValueError as exc:
            return codec.Error(ErrorCode.CORRUPT_BLOCK, f"corrupt block: {exc}")
        out, _ = mlp_forward(self.decoder, c)
        return codec.Response(f.request_id, out)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = ServerSession(self.server.session_cfg, self.server.decoder)
        self.server.sessions.append(session)
        sock = self.request
        while True:
            try:
                head = _recv_exact(sock, codec.HEADER_SIZE, allow_eof=True)
                if head is None:
                    return
                try:
                    ftype, length = codec.parse_header(head)
                except FrameError as exc:
                    # framing is lost; report and drop the connection
                    sock.sendall(codec.encode_frame(codec.Error(ErrorCode.MALFORMED, str(exc))))
                    return
                body = _recv_exact(sock, length)
                try:
                    frame = codec.decode_body(ftype, body)
                except FrameError as exc:
                    reply = codec.Error(ErrorCode.MALFORMED, str(exc))
                    session.received_types.append(ftype)
                else:
                    reply = session.handle(frame)
                sock.sendall(codec.encode_frame(reply))
            except (OSError, TransportError):
                return


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ServerHandle:
    """A running TCP server; use as a context manager or call :meth:`close`."""

    def __init__(self, cfg: SessionConfig, decoder):
        self.cfg = cfg
        self._server = _TcpServer((cfg.transport.host, cfg.transport.port), _Handler)
        self._server.session_cfg = cfg
        self._server.decoder = decoder
        self._server.sessions = []
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def sessions(self) -> list[ServerSession]:
        return self._server.sessions

    def connect(self) -> "TcpChannel":
        host, port = self.address
        return TcpChannel(host, port, self.cfg.timeout)

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackServer:
    """In-process server: every connection gets its own :class:`ServerSession`."""

    def __init__(self, cfg: SessionConfig, decoder):
        self.cfg = cfg
        self.decoder = decoder
        self.sessions: list[ServerSession] = []

    def connect(self) -> "LoopbackChannel":
        session = ServerSession(self.cfg, self.decoder)
        self.sessions.append(session)
        return LoopbackChannel(session)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(cfg: SessionConfig, dec) -> ServerHandle | LoopbackServer:
    if isinstance(cfg.transport, Tcp):
        try:
            return ServerHandle(cfg, dec)
        except OSError as exc:
            raise TransportError(f"cannot bind {cfg.transport.host}:{cfg.transport.port}: {exc}") from exc
    return LoopbackServer(cfg, dec)


# -- channels ------------------------------------------------------------------

def _recv_exact(sock, n: int, allow_eof: bool = False):
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(min(n - got, 1 << 20))
        except socket.timeout as exc:
            raise SplitTimeout("timed out waiting for the peer") from exc
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpChannel:
    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except socket.timeout as exc:
            raise SplitTimeout(f"timed out connecting to {host}:{port}") from exc
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc

    def send(self, data: bytes):
        try:
            self.sock.sendall(data)
        except socket.timeout as exc:
            raise SplitTimeout("timed out sending") from exc
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv(self):
        try:
            return codec.read_frame(lambda n: _recv_exact(self.sock, n))
        except OSError as exc:
            if isinstance(exc, SplitError):
                raise
            raise TransportError(f"receive failed: {exc}") from exc

    def close(self):
        self.sock.close()


class LoopbackChannel:
    def __init__(self, session: ServerSession):
        self.session = session
        self._pending: list[bytes] = []

    def send(self, data: bytes):
        self._pending.append(self.session.handle_bytes(data))

    def recv(self):
        if not self._pending:
            raise TransportError("no reply pending")
        return codec.decode_frame(self._pending.pop(0))

    def close(self):
        self._pending.clear()


# -- client --------------------------------------------------------------------

class SplitClient:
    """One session with a server.  Not safe to share between threads."""

    def __init__(self, cfg: SessionConfig, encoder, channel):
        self.cfg = cfg
        self.encoder = encoder
        self.channel = channel
        self.log = TransferLog()
        self._next_id = 1
        self._shape = None

    def _send(self, frame, payload: int = 0) -> None:
        data = codec.encode_frame(frame)
        self.channel.send(data)
        self.log.frames_sent += 1
        self.log.payload_bytes += payload
        self.log.overhead_bytes += len(data) - payload

    def _reply(self):
        reply = self.channel.recv()
        if isinstance(reply, codec.Error):
            raise ServerError(reply.code, reply.message)
        return reply

    def hello(self, shape) -> None:
        shape = tuple(int(d) for d in shape)
        self._send(codec.Hello(K=self.cfg.K, shape=shape))
        ack = self._reply()
        if not isinstance(ack, codec.Hello) or ack.K != self.cfg.K:
            raise ServerError(ErrorCode.HANDSHAKE, f"unexpected handshake reply {ack!r}")
        self._shape = shape

    def encode(self, x) -> codec.Features:
        code, _ = mlp_forward(self.encoder, as_features(x))
        q = quantize(code, self.cfg.quantizer)
        rid = self._next_id
        self._next_id += 1
        return codec.Features(rid, self.cfg.K, code.shape, codec.pack(q.block.indices, self.cfg.bit_width))

    def infer(self, x) -> np.ndarray:
        features = self.encode(x)
        if self._shape is None:
            self.hello(features.shape)
        self._send(features, payload=len(features.packed.data))
        self.log.raw_fp16_bytes += codec.fp16_bytes(features.shape)
        reply = self._reply()
        if not isinstance(reply, codec.Response) or reply.request_id != features.request_id:
            raise ServerError(ErrorCode.PROTOCOL, f"unexpected reply {reply!r}")
        return reply.result

    def close(self):
        self.channel.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(cfg: SessionConfig, server=None):
    if server is not None:
        return server.connect()
    if isinstance(cfg.transport, Tcp):
        return TcpChannel(cfg.transport.host, cfg.transport.port, cfg.timeout)
    raise ValueError("a loopback session needs the LoopbackServer to connect to")


def client_infer(x, enc, cfg: SessionConfig, server=None) -> tuple[np.ndarray, TransferLog]:
    """Open a session, run one inference, close.  Returns (decoder output, log)."""
    with SplitClient(cfg, enc, connect(cfg, server)) as client:
        result = client.infer(x)
        return result, client.log


# -- benchmark -----------------------------------------------------------------

@dataclass(frozen=True)
class Discrete:
    bits: int

    @property
    def label(self) -> str:
        return "fp16" if self.bits >= codec.FP16_BITS else f"discrete{self.bits}"


@dataclass(frozen=True)
class TopKMethod:
    k: int
    epsilon: float = 0.0

    @property
    def label(self) -> str:
        return f"topk{self.k}_eps{self.epsilon:g}"


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    nominal_ratio: float
    wire_ratio: float
    frame_bytes: int
    mse: float
    seconds: float


def _run_method(method, e, seed: int):
    ref = e.astype(np.float16).astype(np.float64)
    if isinstance(method, Discrete) and method.bits >= codec.FP16_BITS:
        frame = codec.Raw16(0, e.astype(np.float16))
        recon = frame.data.astype(np.float64)
        nominal = codec.compression_rate(codec.Method.DISCRETE, codec.FP16_BITS)
    elif isinstance(method, Discrete):
        K = 2 ** method.bits
        q = quantize(e, QuantizerConfig(K, Scaling.CLIPPED_LINEAR))
        frame = codec.Features(0, K, e.shape, codec.pack(q.block.indices, method.bits))
        recon = q.reconstructed
        nominal = codec.compression_rate(codec.Method.DISCRETE, method.bits)
    else:
        idx, vals = sparsify_rows(e, method.k, method.epsilon, seed)
        frame = codec.TopK(0, e.shape, method.k, idx, vals)
        recon = densify_rows(idx, vals, e.shape)
        nominal = codec.compression_rate(codec.Method.TOPK, method.k, e.shape[-1])
    return frame, recon, ref, nominal


def benchmark(methods, x, trials: int = 1, seed: int = 0) -> list[BenchmarkRow]:
    """Compare wire cost and distortion of each method on the same features.

    Every method sees the linearly scaled features; distortion is measured
    against their FP16 rounding, the uncompressed baseline.
    """
    if not methods:
        raise ValueError("no methods to benchmark")
    e = scale(as_features(x), Scaling.CLIPPED_LINEAR)
    raw = codec.fp16_bytes(e.shape)
    rows = []
    for method in methods:
        times = []
        for _ in range(max(1, trials)):
            t0 = time.perf_counter()
            frame, recon, ref, nominal = _run_method(method, e, seed)
            data = codec.encode_frame(frame)
            times.append(time.perf_counter() - t0)
        rows.append(BenchmarkRow(method.label, nominal, codec.measured_ratio(raw, len(data)), len(data),
                                 float(np.mean((recon - ref) ** 2)), float(np.median(times))))
    return rows


def benchmark_csv(rows, timing: bool = False) -> str:
    head = "method,nominal_ratio,wire_ratio,frame_bytes,mse" + (",seconds" if timing else "")
    lines = [head]
    for r in rows:
        line = f"{r.method},{r.nominal_ratio:.4f},{r.wire_ratio:.4f},{r.frame_bytes},{r.mse:.8e}"
        lines.append(line + (f",{r.seconds:.6f}" if timing else ""))
    return "\n".join(lines) + "\n"
