import hashlib
import os

import numpy as np
import pytest

from hsjp.checkpoint import load_checkpoint
from hsjp.cli import run
from hsjp.codecs import decode_png

SMALL = ["--size", "32", "--batch", "4", "--seed", "7"]


def ok(argv, capsys=None):
    code = run(argv)
    assert code == 0, argv
    return code


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pre, kp, kp_eval = root / "pre", root / "kp", root / "kpe"
    ok(["synth", "--count", "12", "--out", str(pre), *SMALL])
    ok(["synth", "--count", "8", "--kind", "keypoint", "--out", str(kp), *SMALL])
    ok(["synth", "--count", "4", "--kind", "keypoint", "--out", str(kp_eval), "--size", "32",
        "--seed", "8"])
    return root, pre, kp, kp_eval


@pytest.fixture(scope="module")
def pretrained(corpora):
    root, pre, _, _ = corpora
    ckpt = root / "pre.ckpt"
    ok(["pretrain", "--data", str(pre), "--n", "2", "--epochs", "3", "--out", str(ckpt), *SMALL])
    return ckpt


def test_synth_writes_pngs(corpora):
    _, pre, kp, _ = corpora
    assert len([f for f in os.listdir(pre) if f.endswith(".png")]) == 12
    assert (kp / "annotations.txt").read_text().count("\n") == 8


def test_pretrain_checkpoint_and_log(pretrained):
    assert load_checkpoint(pretrained).head_channels == 4
    lines = open(str(pretrained) + ".log").read().splitlines()
    assert [int(l.split("\t")[0]) for l in lines] == [0, 1, 2]
    assert all(len(l.split("\t")) in (3, 4) for l in lines)


def test_pretrain_idempotent(corpora, pretrained, tmp_path):
    _, pre, _, _ = corpora
    again = tmp_path / "again.ckpt"
    ok(["pretrain", "--data", str(pre), "--n", "2", "--epochs", "3", "--out", str(again), *SMALL])
    assert digest(again) == digest(pretrained)
    assert digest(str(again) + ".log") == digest(str(pretrained) + ".log")


def test_concat_unshuffled_six_channels(corpora, tmp_path):
    _, pre, _, _ = corpora
    out = tmp_path / "c.ckpt"
    ok(["pretrain", "--data", str(pre), "--n", "2", "--epochs", "1", "--concat-unshuffled",
        "--out", str(out), *SMALL])
    assert load_checkpoint(out).in_channels == 6


def test_eval_hsjp_table(pretrained, corpora, capsys):
    ok(["eval-hsjp", "--ckpt", str(pretrained), "--data", str(corpora[1]), *SMALL])
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric\tvalue" and out[1] == "n\t2"
    assert {l.split("\t")[0] for l in out[1:]} == {"n", "images", "precision", "patch_accuracy"}


def test_sweep_n_rows(corpora, capsys):
    ok(["sweep-n", "--data", str(corpora[1]), "--values", "2,3,4", "--epochs", "1", *SMALL])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "n\tprecision\tpatch_accuracy"
    assert [l.split("\t")[0] for l in lines[1:]] == ["2", "3", "4"]


def test_finetune_and_eval_pose(corpora, pretrained, tmp_path, capsys):
    _, _, kp, kpe = corpora
    out = tmp_path / "ft.ckpt"
    ok(["finetune", "--data", str(kp), "--init", str(pretrained), "--eval-data", str(kpe),
        "--epochs", "2", "--out", str(out), *SMALL])
    assert load_checkpoint(out).head_channels == 13
    assert len(open(str(out) + ".log").read().splitlines()) == 2
    capsys.readouterr()
    ok(["eval-pose", "--ckpt", str(out), "--data", str(kpe)])
    rows = capsys.readouterr().out.splitlines()
    assert rows[-2].startswith("mAP\t") and len(rows) == 1 + 10 + 2


def test_sweeps_freeze_and_fraction(corpora, pretrained, capsys):
    _, _, kp, kpe = corpora
    ok(["sweep-freeze", "--data", str(kp), "--eval-data", str(kpe), "--init", str(pretrained),
        "--values", "0,6", "--epochs", "1", *SMALL])
    assert len(capsys.readouterr().out.splitlines()) == 3
    ok(["sweep-fraction", "--data", str(kp), "--eval-data", str(kpe), "--values", "0.5,1.0",
        "--epochs", "1", *SMALL])
    assert capsys.readouterr().out.splitlines()[0] == "fraction\tmap"


def test_viz_pngs(corpora, pretrained, tmp_path):
    out = tmp_path / "viz"
    ok(["viz", "--ckpt", str(pretrained), "--data", str(corpora[1]), "--out", str(out),
        "--count", "2", *SMALL])
    files = sorted(os.listdir(out))
    assert files == ["viz_00000.png", "viz_00001.png"]
    img = decode_png(open(out / files[0], "rb").read())
    assert img.shape[1] > img.shape[0]  # predicted and target side by side


def test_unknown_flag_exit_2(capsys):
    assert run(["pretrain", "--bogus"]) == 2
    assert run([]) == 2


def test_missing_file_exit_1(tmp_path, capsys):
    out = tmp_path / "x.ckpt"
    assert run(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 1
    assert "not found" in capsys.readouterr().err
    assert not out.exists()


def test_invariant_violation_exit_1(corpora, tmp_path, capsys):
    out = tmp_path / "x.ckpt"
    assert run(["pretrain", "--data", str(corpora[1]), "--n", "3", "--sigma", "5",
                "--out", str(out), *SMALL]) == 1
    assert "sigma" in capsys.readouterr().err
    assert os.listdir(tmp_path) == []


def test_bad_config_file_exit_1(corpora, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n = 2\nn = 3\n")
    assert run(["pretrain", "--data", str(corpora[1]), "--config", str(cfg),
                "--out", str(tmp_path / "x")]) == 1
    assert "duplicate key" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_1(corpora, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"HSJPCKPT garbage")
    assert run(["eval-hsjp", "--ckpt", str(bad), "--data", str(corpora[1])]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_full_scale_preset_warns(tmp_path, capsys):
    # the warning comes from config building, before the missing data dir stops the run
    assert run(["pretrain", "--preset", "paper", "--data", str(tmp_path / "none"),
                "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "not feasible" in err and "not found" in err
