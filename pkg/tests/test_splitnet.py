import socket

import numpy as np
import pytest

from splitquant import codec
from splitquant.codec import ErrorCode, FrameType
from splitquant.quantizer import QuantizerConfig
from splitquant.splitnet import (
    Discrete,
    LoopbackServer,
    ServerError,
    ServerSession,
    SessionConfig,
    SplitClient,
    Tcp,
    TopKMethod,
    TransportError,
    benchmark,
    benchmark_csv,
    client_infer,
    connect,
    serve,
)
from splitquant.training import forward_split, init_autoencoder, init_layer

ENC, DEC = init_autoencoder(6, 4, seed=0)


def _x(seed=0, rows=5):
    return np.random.default_rng(seed).standard_normal((rows, 6))


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestSession:
    def setup_method(self):
        self.session = ServerSession(SessionConfig(4), DEC)

    def test_handshake_ack(self):
        assert self.session.handle(codec.Hello(4, (5, 4))) == codec.Hello(4, (5, 4))

    def test_k_mismatch(self):
        reply = self.session.handle(codec.Hello(8, (5, 4)))
        assert isinstance(reply, codec.Error) and reply.code == ErrorCode.HANDSHAKE

    def test_version_mismatch(self):
        reply = self.session.handle(codec.Hello(4, (5, 4), protocol_version=9))
        assert reply.code == ErrorCode.HANDSHAKE

    def test_decoder_dims_checked(self):
        assert self.session.handle(codec.Hello(4, (5, 3))).code == ErrorCode.SHAPE_MISMATCH

    def test_features_before_hello(self):
        f = codec.Features(1, 4, (1, 4), codec.pack([0, 1, 2, 3], 2))
        assert self.session.handle(f).code == ErrorCode.PROTOCOL

    def test_corrupt_block(self):
        # K=3 uses 2 bits, so the index 3 fits the wire but not the codebook
        session = ServerSession(SessionConfig(3), DEC)
        session.handle(codec.Hello(3, (1, 4)))
        reply = session.handle(codec.Features(1, 3, (1, 4), codec.pack([0, 1, 2, 3], 2)))
        assert reply.code == ErrorCode.CORRUPT_BLOCK
        assert "corrupt block" in reply.message
        ok = session.handle(codec.Features(2, 3, (1, 4), codec.pack([0, 1, 2, 2], 2)))
        assert isinstance(ok, codec.Response) and ok.request_id == 2

    def test_k_and_shape_fixed_per_session(self):
        self.session.handle(codec.Hello(4, (1, 4)))
        assert self.session.handle(codec.Features(1, 8, (1, 4), codec.pack([0] * 4, 3))).code == ErrorCode.PROTOCOL
        assert self.session.handle(codec.Features(1, 4, (2, 4), codec.pack([0] * 8, 2))).code \
            == ErrorCode.SHAPE_MISMATCH
        assert self.session.handle(codec.Features(1, 4, (1, 4), codec.pack([0] * 4, 3))).code == ErrorCode.PROTOCOL

    def test_malformed_bytes(self):
        reply = codec.decode_frame(self.session.handle_bytes(b"garbage!"))
        assert reply.code == ErrorCode.MALFORMED

    def test_unexpected_frame_type(self):
        assert self.session.handle(codec.Error(1, "hi")).code == ErrorCode.PROTOCOL

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SessionConfig(1)
        with pytest.raises(ValueError):
            SessionConfig(257)
        assert SessionConfig(4).bit_width == 2 and SessionConfig(5).bit_width == 3


class TestLoopback:
    def test_matches_in_process_forward(self):
        cfg = SessionConfig(4)
        with LoopbackServer(cfg, DEC) as server:
            out, log = client_infer(_x(), ENC, cfg, server)
        ref, _ = forward_split(_x(), ENC, DEC, QuantizerConfig(4))
        assert out.tobytes() == ref.tobytes()
        assert log.frames_sent == 2

    def test_two_requests_one_connection(self):
        cfg = SessionConfig(4)
        server = LoopbackServer(cfg, DEC)
        with SplitClient(cfg, ENC, server.connect()) as client:
            a = client.infer(_x(1))
            b = client.infer(_x(2))
        assert client._next_id == 3
        assert not np.array_equal(a, b)
        assert len(server.sessions) == 1

    def test_server_sees_only_metadata_and_integers(self):
        cfg = SessionConfig(4)
        server = LoopbackServer(cfg, DEC)
        with SplitClient(cfg, ENC, server.connect()) as client:
            for s in range(3):
                client.infer(_x(s))
        assert set(server.sessions[0].received_types) == {FrameType.HELLO, FrameType.FEATURES}

    def test_byte_accounting(self):
        cfg = SessionConfig(4)
        out, log = client_infer(_x(rows=10), ENC, cfg, LoopbackServer(cfg, DEC))
        assert log.payload_bytes == codec.packed_size(10 * 4, 2)
        hello = len(codec.encode_frame(codec.Hello(4, (10, 4))))
        assert log.overhead_bytes == hello + codec.HEADER_SIZE + 6 + 9 + 5
        assert log.raw_fp16_bytes == 2 * 40

    def test_server_error_surfaces(self):
        cfg = SessionConfig(4)
        server = LoopbackServer(SessionConfig(8), DEC)
        with pytest.raises(ServerError) as info:
            client_infer(_x(), ENC, cfg, server)
        assert info.value.code == ErrorCode.HANDSHAKE

    def test_vit_scale_ratio(self):
        enc = [init_layer(8, 512, rng=0)]
        dec = [init_layer(512, 2, rng=1)]
        cfg = SessionConfig(4)
        x = np.random.default_rng(0).standard_normal((729, 8))
        _, log = client_infer(x, enc, cfg, LoopbackServer(cfg, dec))
        assert log.achieved_ratio >= 7.9
        assert "achieved_ratio=" in log.to_text()

    def test_loopback_needs_server(self):
        with pytest.raises(ValueError):
            connect(SessionConfig(4))


class TestTcp:
    def test_matches_loopback(self):
        cfg = SessionConfig(4, transport=Tcp("127.0.0.1", 0), timeout=5)
        with serve(cfg, DEC) as server:
            with SplitClient(cfg, ENC, server.connect()) as client:
                tcp = [client.infer(_x(s)) for s in range(5)]
            assert set(server.sessions[0].received_types) == {FrameType.HELLO, FrameType.FEATURES}
        lb = LoopbackServer(SessionConfig(4), DEC)
        with SplitClient(SessionConfig(4), ENC, lb.connect()) as client:
            loop = [client.infer(_x(s)) for s in range(5)]
        assert [a.tobytes() for a in tcp] == [b.tobytes() for b in loop]

    def test_server_down(self):
        cfg = SessionConfig(4, transport=Tcp("127.0.0.1", _free_port()), timeout=2)
        with pytest.raises(TransportError):
            client_infer(_x(), ENC, cfg)

    def test_bad_header_gets_error_reply(self):
        cfg = SessionConfig(4, transport=Tcp("127.0.0.1", 0), timeout=5)
        with serve(cfg, DEC) as server:
            chan = server.connect()
            chan.send(b"XX\x01\x01\x00\x00\x00\x00")
            reply = chan.recv()
            chan.close()
        assert reply.code == ErrorCode.MALFORMED and "bad magic" in reply.message

    def test_bad_body_keeps_connection(self):
        cfg = SessionConfig(4, transport=Tcp("127.0.0.1", 0), timeout=5)
        with serve(cfg, DEC) as server:
            chan = server.connect()
            chan.send(b"SQ\x01\x01\x01\x00\x00\x00\x00")
            assert chan.recv().code == ErrorCode.MALFORMED
            chan.send(codec.encode_frame(codec.Hello(4, (1, 4))))
            assert chan.recv() == codec.Hello(4, (1, 4))
            chan.close()

    def test_bind_failure(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            s.listen()
            port = s.getsockname()[1]
            with pytest.raises(TransportError):
                serve(SessionConfig(4, transport=Tcp("127.0.0.1", port)), DEC)


class TestBenchmark:
    METHODS = [Discrete(2), Discrete(4), TopKMethod(64, 0.1), Discrete(16)]

    def test_rows(self):
        x = np.random.default_rng(0).standard_normal((729, 512))
        rows = {r.method: r for r in benchmark(self.METHODS, x)}
        assert rows["discrete2"].nominal_ratio == 8.0
        assert rows["topk64_eps0.1"].nominal_ratio == 8.0
        assert rows["discrete2"].wire_ratio >= 7.9
        assert rows["discrete4"].wire_ratio >= 3.95
        assert rows["fp16"].mse == 0 and rows["fp16"].wire_ratio == pytest.approx(1.0, abs=1e-3)
        assert rows["discrete4"].mse < rows["discrete2"].mse

    def test_deterministic_csv(self):
        x = np.random.default_rng(1).standard_normal((20, 64))
        methods = [Discrete(2), TopKMethod(8, 0.2)]
        a = benchmark_csv(benchmark(methods, x, seed=3))
        b = benchmark_csv(benchmark(methods, x, seed=3))
        assert a == b
        assert a.splitlines()[0] == "method,nominal_ratio,wire_ratio,frame_bytes,mse"

    def test_timing_column(self):
        rows = benchmark([Discrete(2)], np.ones((2, 8)) * np.arange(8))
        assert benchmark_csv(rows, timing=True).splitlines()[0].endswith(",seconds")

    def test_needs_methods(self):
        with pytest.raises(ValueError):
            benchmark([], np.zeros((2, 2)))
