import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from splitquant.cli import build_parser, main
from splitquant.tensor import load_csv, load_tensor, save_tensor

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_entropy_golden(capsys):
    code, out, _ = run(capsys, "entropy", "--input", FIXTURES / "entropy_batch.bin")
    assert code == 0
    assert out == ("bandwidth=0.170136\nsample_count=4096\nsample_std=0.847777\ngrid_lo=-3.892181\n"
                   "grid_hi=3.487508\ngrid_points=4096\nentropy_bits=1.834746\nrecommended_bits=2\n")


def test_entropy_density_csv(capsys, tmp_path):
    dens = tmp_path / "d.csv"
    code, out, _ = run(capsys, "entropy", "--input", FIXTURES / "entropy_batch.bin", "--grid-points", 128,
                       "--tap", "scaled", "--density-csv", dens)
    assert code == 0 and "grid_points=128" in out and "recommended_bits=1" in out
    lines = dens.read_text().splitlines()
    assert lines[0] == "grid,density" and len(lines) == 129


def test_quantize_reconstruct_roundtrip(capsys, tmp_path):
    x = np.random.default_rng(0).standard_normal((4, 6))
    save_tensor(tmp_path / "t.bin", x)
    code, out, _ = run(capsys, "quantize", "--k", 3, "--input", tmp_path / "t.bin", "--out", tmp_path / "q.bin")
    assert code == 0
    assert out.startswith("K=3\nbit_width=2\ncount=24\nframe_bytes=34\ncommit_loss=")
    code, out, _ = run(capsys, "reconstruct", "--input", tmp_path / "q.bin", "--out", tmp_path / "r.bin")
    assert code == 0 and out == "K=3\nshape=4x6\n"
    r = load_tensor(tmp_path / "r.bin")
    from splitquant.quantizer import scale_linear
    assert np.max(np.abs(r - scale_linear(x))) <= 1 / 2 + 1e-6


def test_csv_io(capsys, tmp_path):
    (tmp_path / "t.csv").write_text("0,5,10\n")
    run(capsys, "quantize", "--k", 3, "--csv", "--input", tmp_path / "t.csv", "--out", tmp_path / "q.bin")
    run(capsys, "reconstruct", "--csv", "--input", tmp_path / "q.bin", "--out", tmp_path / "r.csv")
    np.testing.assert_array_equal(load_csv(tmp_path / "r.csv"), [-1, 0, 1])


def test_pack_golden(capsys):
    assert run(capsys, "pack", "--bits", 2, "--values", "1,0,3,2") == (0, "b1\n", "")
    assert run(capsys, "pack", "--bits", 2, "--unpack", "--hex", "b1", "--count", 4) == (0, "1,0,3,2\n", "")


def test_pack_errors(capsys):
    code, out, err = run(capsys, "pack", "--bits", 2, "--values", "5")
    assert code == 1 and err.startswith("error: index 5 at position 0") and err.count("\n") == 1
    code, _, err = run(capsys, "pack", "--bits", 2, "--unpack", "--hex", "b1", "--count", 5)
    assert code == 1 and "truncated payload" in err


def test_frame_dump_golden(capsys):
    code, out, _ = run(capsys, "frame", "--dump", FIXTURES / "features_k4.bin")
    assert code == 0
    assert out == (
        "type=features\nrequest_id=7\nK=4\nshape=2x3\nbit_width=2\ncount=6\npayload_bytes=2\n"
        "00000000  53 51 01 02 16 00 00 00 07 00 00 00 04 00 02 02\n"
        "00000010  00 00 00 03 00 00 00 02 06 00 00 00 b1 0f\n")


def test_frame_hex_and_bad_magic(capsys):
    code, out, _ = run(capsys, "frame", "--hex", "5351010403000000010078")
    assert code == 0 and out.startswith("type=error\ncode=1\nmessage=x\n")
    code, _, err = run(capsys, "frame", "--hex", "0000010403000000010078")
    assert code == 1 and "bad magic" in err


def test_train_golden(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--epochs", 2, "--samples", 64, "--out-dir", tmp_path / "m")
    assert code == 0
    assert out == ("epoch,loss,task,commit\n0,1.21857993,1.19569076,0.09155664\n"
                   "1,1.14812353,1.11935522,0.11507326\n2,1.10813496,1.07911728,0.11607070\n")
    assert (tmp_path / "m" / "model.txt").read_text() == "enc 0 identity\ndec 0 identity\n"


def test_gradcheck_golden(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert out.startswith("max_rel_error=") and "parameter_count=103\nperturbation=0.0001\n" in out
    code, _, err = run(capsys, "gradcheck", "--tolerance", 0)
    assert code == 1 and "gradient check failed" in err


def test_benchmark_golden(capsys):
    code, out, _ = run(capsys, "benchmark", "--shape", "4x16", "--topk", 2)
    assert code == 0
    assert out == ("method,nominal_ratio,wire_ratio,frame_bytes,mse\n"
                   "discrete2,8.0000,2.9091,44,3.38141071e-02\n"
                   "discrete4,4.0000,2.1333,60,1.70665643e-03\n"
                   "fp16,1.0000,0.8591,149,0.00000000e+00\n"
                   "topk2_eps0.1,8.0000,2.7826,46,1.18402539e-01\n")


def test_serve_and_infer(capsys, tmp_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen([sys.executable, "-m", "splitquant", "serve", "--k", "4", "--port", "0"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        line = proc.stdout.readline().strip()
        assert line.startswith("listening=127.0.0.1:")
        port = line.rsplit(":", 1)[1]
        save_tensor(tmp_path / "x.bin", np.random.default_rng(0).standard_normal((3, 4)))
        code, out, _ = run(capsys, "infer", "--input", tmp_path / "x.bin", "--port", port,
                           "--out", tmp_path / "y.bin")
        assert code == 0
        assert out.startswith("frames_sent=2\npayload_bytes=2\n")
        assert load_tensor(tmp_path / "y.bin").shape == (3, 4)
    finally:
        proc.terminate()
        proc.wait(5)


def test_infer_server_down(capsys, tmp_path, monkeypatch):
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    save_tensor(tmp_path / "x.bin", np.zeros((1, 4)) + [0, 1, 2, 3])
    monkeypatch.setenv("SPLITQUANT_TIMEOUT", "1")
    code, out, err = run(capsys, "infer", "--input", tmp_path / "x.bin", "--port", port)
    assert code == 1 and out == "" and err.startswith("error: cannot connect")


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["quantize", "--bogus"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"quantize", "reconstruct", "entropy", "pack", "frame", "train",
                                "gradcheck", "serve", "infer", "benchmark"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
    assert "--seed" in sub.choices["train"].format_help()
    assert "SPLITQUANT_PORT" in sub.choices["serve"].format_help()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "splitquant", "pack", "--bits", "1", "--values", "1,1,1,1,1,1,1,1"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout == "ff\n"
