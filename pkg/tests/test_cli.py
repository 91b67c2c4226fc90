from __future__ import annotations

import numpy as np
import pytest

from streamvit.cli import main
from streamvit.config import desk_config, save_config
from streamvit.io import read_features, write_sequence


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_encode_round_trip(tmp_path, capsys):
    seq, dump = tmp_path / "s.bin", tmp_path / "f.bin"
    code, out, _ = run(capsys, "gen", "--out", str(seq), "--frames", "3", "--seed", "4")
    assert code == 0 and out.count("crc32=") == 3
    code, out, _ = run(capsys, "encode", "--seq", str(seq), "--out", str(dump))
    assert code == 0
    assert out.count("tokens crc32=") == 3
    assert "tokens_shape=8x8x32" in out
    assert read_features(dump).tokens.shape == (3, 8, 8, 32)


def test_memory_flag_changes_frames_after_first(tmp_path, capsys):
    seq = tmp_path / "s.bin"
    run(capsys, "gen", "--out", str(seq), "--frames", "3")
    run(capsys, "encode", "--seq", str(seq), "--memory", "1", "--out", str(tmp_path / "a.bin"))
    run(capsys, "encode", "--seq", str(seq), "--memory", "inf", "--out", str(tmp_path / "b.bin"))
    a, b = read_features(tmp_path / "a.bin"), read_features(tmp_path / "b.bin")
    np.testing.assert_array_equal(a.tokens[0], b.tokens[0])
    assert not np.array_equal(a.tokens[1], b.tokens[1])
    assert not np.array_equal(a.tokens[2], b.tokens[2])


def test_encode_errors_exit_nonzero(tmp_path, capsys):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    code, _, err = run(capsys, "encode", "--seq", str(empty))
    assert code == 2 and "offset 0" in err
    write_sequence(tmp_path / "small.bin", np.zeros((1, 3, 16, 16), np.float32))
    code, _, err = run(capsys, "encode", "--seq", str(tmp_path / "small.bin"))
    assert code == 2 and "frame shape" in err
    code, _, err = run(capsys, "encode", "--seq", str(tmp_path / "missing.bin"))
    assert code == 2


def test_config_file_and_unknown_keys(tmp_path, capsys):
    cfg_path = tmp_path / "c.cfg"
    save_config(desk_config(channels=16, heads=2, mode="sequence"), cfg_path)
    seq = tmp_path / "s.bin"
    run(capsys, "gen", "--out", str(seq), "--frames", "2")
    code, out, _ = run(capsys, "encode", "--config", str(cfg_path), "--seq", str(seq))
    assert code == 0 and "tokens_shape=8x8x16" in out and "s4=" not in out
    cfg_path.write_text("heads = 2\nwibble = 3\n")
    code, _, err = run(capsys, "encode", "--config", str(cfg_path), "--seq", str(seq))
    assert code == 2 and "unknown config key" in err


def test_verify_pass_and_fault(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--seeds", "1", "--frames", "2", "--mode", "sequence")
    assert code == 0 and "all_passed=true" in out
    code, out, _ = run(capsys, "verify", "--seeds", "1", "--frames", "3", "--fault", "skip-push")
    assert code == 1
    assert "FAIL  causality" in out


def test_verify_with_sequence_file(capsys, tmp_path):
    seq = tmp_path / "s.bin"
    run(capsys, "gen", "--out", str(seq), "--frames", "2")
    code, out, _ = run(capsys, "verify", "--seeds", "1", "--frames", "1", "--seq", str(seq), "--dtype", "f32")
    assert code == 0 and "PASS  sequence-vs-oracle" in out


def test_flops_commands(capsys):
    code, out, _ = run(capsys, "flops", "--paper", "--frames", "16")
    assert code == 0 and "ordering_frame_lt_streaming_lt_clip=true" in out
    code, out, _ = run(capsys, "flops", "--frames", "2", "--instrumented", "--mode", "sequence")
    assert code == 0 and "instrumented_matches_closed_form=true" in out


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", "1", "--grid", "2x3", "--channels", "4")
    assert code == 0 and "all_passed=true" in out


def test_bench_command(capsys):
    code, out, _ = run(capsys, "bench", "--frames", "2")
    assert code == 0 and "mean_ms_per_frame=" in out


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["flops", "--frames", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["encode", "--seq", "x", "--memory", "0"])
