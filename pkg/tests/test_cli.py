import filecmp

import numpy as np
import pytest

from segkit.cli import CONFIG_KEYS, build_parser, main, parse_run_config
from segkit.errors import UsageError
from segkit.imageio import read_pgm, write_pgm


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def manifest_splits(root):
    return [line.split()[1] for line in (root / "manifest.txt").read_text().splitlines()]


def test_synth_split_and_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "synth", "--task", "ships_optical", "--count", "20", "--size", "64", "--seed", "7", "--out", str(a))[0] == 0
    run(capsys, "synth", "--task", "ships_optical", "--count", "20", "--size", "64", "--seed", "7", "--out", str(b))
    splits = manifest_splits(a)
    assert splits.count("train") == 16 and splits.count("validation") == 4
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.subdirs["images"].diff_files and not cmp.subdirs["masks"].diff_files


def test_synth_bad_task(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--task", "boats", "--count", "2", "--out", str(tmp_path))
    assert code == 1 and "ships_optical" in err


def test_synth_zero_count(tmp_path, capsys):
    assert run(capsys, "synth", "--task", "trees", "--count", "0", "--out", str(tmp_path))[0] == 1


def test_unknown_flag_is_usage(capsys):
    assert run(capsys, "describe", "--bogus")[0] == 1


def test_diff_identical(tmp_path, capsys):
    m = np.random.default_rng(0).integers(0, 2, (8, 8)).astype(np.uint8)
    write_pgm(tmp_path / "p.pgm", m)
    code, _, _ = run(capsys, "diff", "--pred", str(tmp_path / "p.pgm"), "--gt", str(tmp_path / "p.pgm"), "--out", str(tmp_path / "d.pgm"))
    assert code == 0 and not read_pgm(tmp_path / "d.pgm").any()


def test_diff_bad_file(tmp_path, capsys):
    (tmp_path / "x.pgm").write_bytes(b"P5\n4 4\n255\n")
    code, _, err = run(capsys, "diff", "--pred", str(tmp_path / "x.pgm"), "--gt", str(tmp_path / "x.pgm"), "--out", str(tmp_path / "d.pgm"))
    assert code == 2 and "byte" in err


def test_describe_row(capsys):
    code, out, _ = run(capsys, "describe", "--model", "modified_unet", "--input-size", "512", "--num-classes", "2")
    assert code == 0
    row = next(line for line in out.splitlines() if line.startswith("0 "))
    assert "[512,512,1]" in row and "[512,512,64]" in row


def test_describe_from_config_with_override(tmp_path, capsys):
    (tmp_path / "r.cfg").write_text("# run\nmodel = vgg_unet\ninput_size = 64\nnum_classes = 5\ninput_channels = 3\n")
    code, out, _ = run(capsys, "describe", "--config", str(tmp_path / "r.cfg"), "--input-size", "96")
    assert code == 0 and "input=96x96x3" in out


def test_config_errors_reported_together():
    with pytest.raises(UsageError) as e:
        parse_run_config("model = modified_unet\ncolour = red\n", required=("model", "input_size", "num_classes", "out_dir"))
    msg = str(e.value)
    assert "colour" in msg and "input_size" in msg and "num_classes" in msg and "out_dir" in msg


def test_config_flags_cover_keys():
    sub = build_parser()._subparsers._group_actions[0].choices
    for cmd in ("train", "describe"):
        dests = {a.dest for a in sub[cmd]._actions}
        assert set(CONFIG_KEYS) <= dests
        help_text = sub[cmd].format_help()
        assert "default:" in help_text


def test_train_eval_predict(tmp_path, capsys):
    data = tmp_path / "d"
    run(capsys, "synth", "--task", "buildings", "--count", "5", "--size", "64", "--seed", "1", "--out", str(data))
    (tmp_path / "r.cfg").write_text(
        f"model = modified_unet\ninput_size = 64\nnum_classes = 2\nwidth_multiplier = 1/16\n"
        f"loss = binary_ce\nepochs = 5\nbatch_size = 2\ndata_root = {data}\nout_dir = {tmp_path / 'o'}\n"
    )
    code, out, _ = run(capsys, "train", "--config", str(tmp_path / "r.cfg"), "--epochs", "2")
    assert code == 0 and "epoch 2" in out and "epoch 3" not in out
    hist = (tmp_path / "o" / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,loss,train_acc,train_miou,val_acc,val_miou,seconds" and len(hist) == 3
    ck = str(tmp_path / "o" / "checkpoint.segc")
    code, out, _ = run(capsys, "eval", "--model", ck, "--data", str(data), "--split", "all")
    assert code == 0 and out.splitlines()[0].startswith("class=0 iou=") and "pixel_acc=" in out
    img = str(data / "images" / "00000.pgm")
    code, _, _ = run(capsys, "predict", "--model", ck, "--input", img, "--out", str(tmp_path / "p.pgm"), "--probs", str(tmp_path / "p.tnsr"))
    assert code == 0 and read_pgm(tmp_path / "p.pgm").shape == (64, 64)
    assert set(np.unique(read_pgm(tmp_path / "p.pgm")).tolist()) <= {0, 1}


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert run(capsys, "eval", "--model", str(tmp_path / "none.segc"), "--data", str(tmp_path))[0] == 2


def test_verify_oracles(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "oracles")
    assert code == 0 and "FAIL" not in out


def test_verify_gradcheck(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "gradcheck")
    assert code == 0 and "FAIL" not in out


def test_verify_failure_exit_code(capsys, monkeypatch):
    from segkit import cli, verify

    monkeypatch.setitem(cli.SUITES, "oracles", lambda: [verify.CheckResult("x", 1.0, 0.0, False)])
    assert run(capsys, "verify", "--suite", "oracles")[0] == 3
