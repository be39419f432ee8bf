"""Command-line entry point: ``splitquant <subcommand> ...``.

Tensors are read and written in the binary fixture format of
:mod:`splitquant.tensor` (``--csv`` switches to CSV for small tensors).
Results go to stdout as ``key=value`` lines or CSV; diagnostics go to stderr.
Usage errors exit with status 2, runtime errors with status 1.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, entropy, splitnet, training
from .quantizer import CommitmentForm, QuantizerConfig, QuantizedBlock, Scaling, quantize, reconstruct
from .tensor import load_csv, load_tensor, save_csv, save_tensor

ENV_HOST = "SPLITQUANT_HOST"
ENV_PORT = "SPLITQUANT_PORT"
ENV_TIMEOUT = "SPLITQUANT_TIMEOUT"


def _read(path, csv: bool):
    return load_csv(path) if csv else load_tensor(path)


def _write(path, t, csv: bool):
    (save_csv if csv else save_tensor)(path, t)


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.lower().split("x"))


def hexdump(data: bytes) -> str:
    lines = []
    for off in range(0, len(data), 16):
        chunk = data[off:off + 16]
        lines.append(f"{off:08x}  {' '.join(f'{b:02x}' for b in chunk)}")
    return "\n".join(lines) + "\n"


def describe_frame(f) -> str:
    kind = codec._TYPE_OF[type(f)].name.lower()
    out = [f"type={kind}"]
    if isinstance(f, codec.Hello):
        out += [f"protocol_version={f.protocol_version}", f"K={f.K}", f"shape={'x'.join(map(str, f.shape))}"]
    elif isinstance(f, codec.Features):
        out += [f"request_id={f.request_id}", f"K={f.K}", f"shape={'x'.join(map(str, f.shape))}",
                f"bit_width={f.packed.bit_width}", f"count={f.packed.count}", f"payload_bytes={len(f.packed.data)}"]
    elif isinstance(f, codec.Response):
        out.append(f"request_id={f.request_id}")
        if isinstance(f.result, np.ndarray):
            out.append(f"shape={'x'.join(map(str, f.result.shape))}")
        else:
            out.append(f"value={f.result:.9g}")
    elif isinstance(f, codec.Error):
        out += [f"code={f.code}", f"message={f.message}"]
    elif isinstance(f, codec.TopK):
        out += [f"request_id={f.request_id}", f"shape={'x'.join(map(str, f.shape))}", f"k={f.k}"]
    elif isinstance(f, codec.Raw16):
        out += [f"request_id={f.request_id}", f"shape={'x'.join(map(str, f.data.shape))}"]
    return "\n".join(out) + "\n"


# -- model files ---------------------------------------------------------------

def save_model(directory, enc, dec) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for side, layers in (("enc", enc), ("dec", dec)):
        for i, layer in enumerate(layers):
            save_tensor(d / f"{side}{i}_weights.bin", layer.weights)
            save_tensor(d / f"{side}{i}_bias.bin", layer.bias)
            manifest.append(f"{side} {i} {layer.activation.value}")
    (d / "model.txt").write_text("\n".join(manifest) + "\n")


def load_model(directory):
    d = Path(directory)
    enc, dec = [], []
    for line in (d / "model.txt").read_text().split("\n"):
        if not line.strip():
            continue
        side, i, act = line.split()
        layer = training.DenseLayer(load_tensor(d / f"{side}{i}_weights.bin"),
                                    load_tensor(d / f"{side}{i}_bias.bin"), act)
        (enc if side == "enc" else dec).append(layer)
    return enc, dec


def _model(args):
    if args.model:
        return load_model(args.model)
    return training.init_autoencoder(args.in_dim, args.code_dim, seed=args.seed)


# -- subcommands ---------------------------------------------------------------

def cmd_quantize(args):
    x = _read(args.input, args.csv)
    cfg = QuantizerConfig(args.k, Scaling(args.scaling), CommitmentForm(args.commitment))
    q = quantize(x, cfg)
    width = codec.bits_for_levels(args.k)
    frame = codec.Features(0, args.k, x.shape, codec.pack(q.block.indices, width))
    data = codec.encode_frame(frame)
    Path(args.out).write_bytes(data)
    print(f"K={args.k}\nbit_width={width}\ncount={q.block.indices.size}\n"
          f"frame_bytes={len(data)}\ncommit_loss={q.commit_loss:.6f}")


def cmd_reconstruct(args):
    f = codec.decode_frame(Path(args.input).read_bytes())
    if not isinstance(f, codec.Features):
        raise ValueError(f"expected a features frame, got {type(f).__name__}")
    c = reconstruct(QuantizedBlock(f.K, f.shape, codec.unpack(f.packed)))
    _write(args.out, c, args.csv)
    print(f"K={f.K}\nshape={'x'.join(map(str, f.shape))}")


def cmd_entropy(args):
    x = _read(args.input, args.csv)
    report = entropy.feature_entropy(x, tap=args.tap, scaling=Scaling(args.scaling), grid_points=args.grid_points)
    sys.stdout.write(report.to_text())
    if args.density_csv:
        d = report.density
        rows = "\n".join(f"{g:.6f},{p:.8e}" for g, p in zip(d.grid, d.density))
        Path(args.density_csv).write_text("grid,density\n" + rows + "\n")


def cmd_pack(args):
    if args.unpack:
        data = bytes.fromhex(args.hex)
        values = codec.unpack(codec.PackedIndices(args.bits, args.count, data))
        print(",".join(str(int(v)) for v in values))
    else:
        if args.values is None:
            raise ValueError("--values is required when packing")
        print(codec.pack(_ints(args.values), args.bits).data.hex())


def cmd_frame(args):
    if args.dump:
        data = Path(args.dump).read_bytes()
    else:
        data = bytes.fromhex(args.hex)
    frame = codec.decode_frame(data)
    sys.stdout.write(describe_frame(frame))
    sys.stdout.write(hexdump(data))


def _train_config(args):
    qcfg = QuantizerConfig(args.k, Scaling(args.scaling), CommitmentForm(args.commitment), args.alpha)
    return training.TrainConfig(qcfg, learning_rate=args.lr, batch_size=args.batch_size,
                                epochs=args.epochs, seed=args.seed)


def cmd_train(args):
    if args.input:
        data = _read(args.input, args.csv)
    else:
        data = training.gaussian_mixture(args.samples, dim=args.in_dim, seed=args.seed)
    enc, dec = training.init_autoencoder(data.shape[-1], args.code_dim, seed=args.seed)
    result = training.train(data, _train_config(args), enc, dec, quantized=not args.unquantized)
    sys.stdout.write(training.history_csv(result.history))
    if args.out_dir:
        save_model(args.out_dir, result.encoder, result.decoder)


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    enc = training.init_mlp([args.in_dim, args.hidden, args.code_dim], rng=rng)
    dec = training.init_mlp([args.code_dim, args.hidden, args.in_dim], rng=rng)
    qcfg = QuantizerConfig(args.k, Scaling(args.scaling), CommitmentForm(args.commitment), args.alpha)
    report = training.grad_check(enc, dec, qcfg, args.perturbation, seed=args.seed)
    print(f"max_rel_error={report.max_rel_error:.3e}\nparameter_count={report.parameter_count}\n"
          f"perturbation={report.perturbation:g}")
    if report.max_rel_error > args.tolerance:
        raise RuntimeError(f"gradient check failed: {report.max_rel_error:.3e} > {args.tolerance:g}")


def _session(args, shape=None):
    return splitnet.SessionConfig(K=args.k, shape=shape, transport=splitnet.Tcp(args.host, args.port),
                                  timeout=args.timeout, scaling=Scaling(args.scaling))


def cmd_serve(args):
    _, dec = _model(args)
    handle = splitnet.serve(_session(args), dec)
    host, port = handle.address
    print(f"listening={host}:{port}", flush=True)
    try:
        handle._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()


def cmd_infer(args):
    x = _read(args.input, args.csv)
    enc, _ = _model(args)
    result, log = splitnet.client_infer(x, enc, _session(args))
    if args.out:
        _write(args.out, result, args.csv)
    sys.stdout.write(log.to_text())


def cmd_benchmark(args):
    if args.input:
        x = _read(args.input, args.csv)
    else:
        x = np.random.default_rng(args.seed).standard_normal(_shape(args.shape))
    methods = [splitnet.Discrete(b) for b in _ints(args.bits)]
    methods += [splitnet.TopKMethod(k, args.epsilon) for k in _ints(args.topk)]
    rows = splitnet.benchmark(methods, x, trials=args.trials, seed=args.seed)
    sys.stdout.write(splitnet.benchmark_csv(rows, timing=args.timing))


# -- parser --------------------------------------------------------------------

def _add_io(p, required=True):
    p.add_argument("--input", required=required, help="input tensor file")
    p.add_argument("--csv", action="store_true", help="read/write tensors as CSV instead of binary fixtures")


def _add_quant(p, k_default=4):
    p.add_argument("--k", type=int, default=k_default, help="number of quantization levels (default %(default)s)")
    p.add_argument("--scaling", choices=[s.value for s in Scaling], default=Scaling.CLIPPED_LINEAR.value,
                   help="scaling before rounding (default %(default)s)")


def _add_commit(p):
    p.add_argument("--commitment", choices=[c.value for c in CommitmentForm], default="cosine",
                   help="commitment loss form (default %(default)s)")
    p.add_argument("--alpha", type=float, default=0.25, help="commitment weight (default %(default)s)")


def _add_model(p):
    p.add_argument("--model", help="model directory written by `train --out-dir`")
    p.add_argument("--in-dim", type=int, default=4, help="feature dims for a seeded model (default %(default)s)")
    p.add_argument("--code-dim", type=int, default=2, help="code dims for a seeded model (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="seed for the model initialisation (default %(default)s)")


def _add_net(p):
    p.add_argument("--host", default=os.environ.get(ENV_HOST, "127.0.0.1"),
                   help=f"server address (env {ENV_HOST}, default %(default)s)")
    p.add_argument("--port", type=int, default=int(os.environ.get(ENV_PORT, "7070")),
                   help=f"server port (env {ENV_PORT}, default %(default)s)")
    p.add_argument("--timeout", type=float, default=float(os.environ.get(ENV_TIMEOUT, splitnet.DEFAULT_TIMEOUT)),
                   help=f"socket timeout in seconds (env {ENV_TIMEOUT}, default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitquant", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a tensor into a features frame")
    _add_io(p)
    _add_quant(p)
    p.add_argument("--commitment", choices=[c.value for c in CommitmentForm], default="cosine",
                   help="commitment loss form reported (default %(default)s)")
    p.add_argument("--out", required=True, help="output frame file")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("reconstruct", help="reconstruct a tensor from a features frame")
    p.add_argument("--input", required=True, help="features frame file")
    p.add_argument("--out", required=True, help="output tensor file")
    p.add_argument("--csv", action="store_true", help="write the tensor as CSV")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("entropy", help="estimate entropy and recommend a bit width")
    _add_io(p)
    p.add_argument("--grid-points", type=int, default=entropy.DEFAULT_GRID_POINTS,
                   help="integration grid size (default %(default)s)")
    p.add_argument("--tap", choices=["raw", "scaled"], default="raw",
                   help="measure raw activations or scaled values (default %(default)s)")
    p.add_argument("--scaling", choices=[s.value for s in Scaling], default=Scaling.CLIPPED_LINEAR.value,
                   help="scaling used when --tap scaled (default %(default)s)")
    p.add_argument("--density-csv", help="also write the (grid, density) curve as CSV")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("pack", help="pack indices to hex, or unpack hex to indices")
    p.add_argument("--bits", type=int, required=True, help="bit width 1-8")
    p.add_argument("--values", help="comma-separated indices to pack")
    p.add_argument("--unpack", action="store_true", help="unpack --hex instead of packing")
    p.add_argument("--hex", help="packed bytes as hex (with --unpack)")
    p.add_argument("--count", type=int, help="number of indices (with --unpack)")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("frame", help="decode a frame and print a hex dump")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--dump", help="frame file")
    g.add_argument("--hex", help="frame bytes as hex")
    p.set_defaults(func=cmd_frame)

    p = sub.add_parser("train", help="train the toy autoencoder; loss history as CSV")
    _add_io(p, required=False)
    _add_quant(p)
    _add_commit(p)
    p.add_argument("--samples", type=int, default=512, help="synthetic samples when no --input (default %(default)s)")
    p.add_argument("--in-dim", type=int, default=4, help="synthetic feature dims (default %(default)s)")
    p.add_argument("--code-dim", type=int, default=2, help="bottleneck dims (default %(default)s)")
    p.add_argument("--epochs", type=int, default=50, help="default %(default)s")
    p.add_argument("--lr", type=float, default=0.1, help="learning rate (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="default %(default)s")
    p.add_argument("--seed", type=int, default=0, help="default %(default)s")
    p.add_argument("--unquantized", action="store_true", help="bypass rounding (reference run)")
    p.add_argument("--out-dir", help="write trained parameters here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare straight-through gradients with finite differences")
    _add_quant(p)
    _add_commit(p)
    p.add_argument("--in-dim", type=int, default=4, help="default %(default)s")
    p.add_argument("--hidden", type=int, default=6, help="default %(default)s")
    p.add_argument("--code-dim", type=int, default=3, help="default %(default)s")
    p.add_argument("--perturbation", type=float, default=1e-4, help="default %(default)s")
    p.add_argument("--tolerance", type=float, default=1e-3, help="fail above this error (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="default %(default)s")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the decoder server")
    _add_quant(p)
    _add_model(p)
    _add_net(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("infer", help="run one split inference against a server")
    _add_io(p)
    _add_quant(p)
    _add_model(p)
    _add_net(p)
    p.add_argument("--out", help="write the server's output tensor here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="compare discrete codes with top-k sparsification")
    _add_io(p, required=False)
    p.add_argument("--shape", default="729x512", help="random input shape when no --input (default %(default)s)")
    p.add_argument("--bits", default="2,4,16", help="discrete bit widths; 16 is the FP16 control (default %(default)s)")
    p.add_argument("--topk", default="64", help="top-k sizes (default %(default)s)")
    p.add_argument("--epsilon", type=float, default=0.1, help="top-k exploration rate (default %(default)s)")
    p.add_argument("--trials", type=int, default=1, help="timing repetitions (default %(default)s)")
    p.add_argument("--timing", action="store_true", help="add a seconds column")
    p.add_argument("--seed", type=int, default=0, help="default %(default)s")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, splitnet.SplitError) as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
