import math
import subprocess
import sys

import numpy as np
import pytest

from rptsr import tensor as T
from rptsr.cli import (
    ConfigError, RunConfig, apply, attention_core_sweep, dump_config, main, normalize_map,
    read_config_file, upsample_map,
)
from rptsr.data import read_image, synth_scene, LayoutSpec, write_image
from rptsr.model import build, forward, preset
from rptsr.training import save_checkpoint


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny rpt checkpoint trained for a few iterations, plus its run directory."""
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "preset=tiny", "data=synth", "iters=12", "frames=8", "size=16", "batch=2",
                 "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture()
def lr_input(tmp_path):
    path = tmp_path / "in.pgm"
    write_image(path, synth_scene(LayoutSpec(), 7, 16, 16))
    return path


# --- config ---------------------------------------------------------------

def test_config_file_parsing(tmp_path):
    (tmp_path / "sub").mkdir()
    cfg_path = tmp_path / "sub" / "run.cfg"
    cfg_path.write_text("# comment line\npreset = tiny\nk = 4   # trailing\nsweep = true\n"
                        "windows = 4,4\ncheckpoint = model.ckpt\n\n")
    cfg = RunConfig()
    read_config_file(cfg_path, cfg)
    assert cfg.k == 4 and cfg.sweep is True and cfg.windows == (4, 4)
    assert cfg.checkpoint == str(tmp_path / "sub" / "model.ckpt")
    assert cfg.model_config().k == 4


@pytest.mark.parametrize("text", ["bogus = 1\n", "k = four\n", "sweep = yes\n", "just words\n"])
def test_config_rejects_bad_lines(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        read_config_file(p, RunConfig())


def test_dump_roundtrip(tmp_path):
    cfg = RunConfig(k=2, windows=(4, 4), sweep=True, out=str(tmp_path))
    p = tmp_path / "dump.cfg"
    p.write_text(dump_config(cfg))
    back = RunConfig()
    read_config_file(p, back)
    assert back == cfg


def test_unknown_override_exit_2(tmp_path, capsys):
    assert main(["train", "itres=5", "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_bad_subcommand_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


# --- train ----------------------------------------------------------------

def test_train_log_and_checkpoint(trained):
    lines = (trained / "train_log.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,loss,psnr"
    assert len(lines) == 1 + 12
    assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(1, 13))
    assert (trained / "final.ckpt").is_file()


def test_train_rerun_is_byte_identical(trained, tmp_path):
    assert main(["train", "preset=tiny", "data=synth", "iters=12", "frames=8", "size=16", "batch=2",
                 "--seed", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()
    assert (tmp_path / "train_log.csv").read_text() == (trained / "train_log.csv").read_text()


def test_train_periodic_checkpoints(tmp_path):
    assert main(["train", "iters=4", "ckpt_every=2", "frames=4", "size=16", "batch=1", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.ckpt")) == ["ckpt_000002.ckpt", "ckpt_000004.ckpt"]


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", f"data={tmp_path / 'nope'}", "--out", str(tmp_path / "o")]) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_train_from_directory(tmp_path):
    hr = tmp_path / "ds" / "hr"
    hr.mkdir(parents=True)
    for i in range(3):
        write_image(hr / f"{i:04d}.pgm", synth_scene(LayoutSpec(), i, 16, 16))
    assert main(["train", f"data={tmp_path / 'ds'}", "iters=3", "batch=2", "--out", str(tmp_path / "o")]) == 0


# --- infer ----------------------------------------------------------------

def test_infer_shape_and_determinism(trained, lr_input, tmp_path):
    args = ["infer", f"checkpoint={trained / 'final.ckpt'}", f"input={lr_input}"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "in_x2.pgm", tmp_path / "b" / "in_x2.pgm"
    assert read_image(a).shape == (1, 32, 32)
    assert a.read_bytes() == b.read_bytes()


def test_infer_odd_extents(trained, tmp_path):
    src = tmp_path / "odd.ppm"
    write_image(src, np.random.default_rng(0).uniform(0, 1, (3, 13, 11)))
    assert main(["infer", f"checkpoint={trained / 'final.ckpt'}", f"input={src}", "--out", str(tmp_path)]) == 0
    assert read_image(tmp_path / "odd_x2.ppm").shape == (3, 26, 22)


def test_infer_uninitialized_checkpoint(tmp_path, lr_input, capsys):
    save_checkpoint(tmp_path / "raw.ckpt", build(preset("tiny"), 0))
    assert main(["infer", f"checkpoint={tmp_path / 'raw.ckpt'}", f"input={lr_input}", "--out", str(tmp_path)]) == 2
    assert "initialization" in capsys.readouterr().err


# --- eval -----------------------------------------------------------------

def _pair_dirs(tmp_path, n, offset):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        g = rng.integers(20, 200, (1, 8, 8)) / 255.0
        write_image(gt / f"{i}.pgm", g)
        write_image(pred / f"{i}.pgm", g + offset)
    return pred, gt


def test_eval_identical_pairs(tmp_path):
    pred, gt = _pair_dirs(tmp_path, 3, 0.0)
    assert main(["eval", f"pred={pred}", f"gt={gt}", "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "eval.csv").read_text().splitlines()[1:]
    assert len(rows) == 3 + 1 and rows[-1].startswith("mean,")
    for r in rows:
        _, p, l1 = r.split(",")
        assert math.isinf(float(p)) and float(l1) == 0.0


def test_eval_uniform_offset_closed_form(tmp_path):
    delta = 10 / 255
    pred, gt = _pair_dirs(tmp_path, 2, delta)
    assert main(["eval", f"pred={pred}", f"gt={gt}", "--out", str(tmp_path / "o")]) == 0
    mean = (tmp_path / "o" / "eval.csv").read_text().splitlines()[-1].split(",")
    assert float(mean[1]) == pytest.approx(-20 * math.log10(delta), abs=1e-9)
    assert float(mean[2]) == pytest.approx(delta, abs=1e-12)


def test_eval_unpaired(tmp_path):
    pred, gt = _pair_dirs(tmp_path, 2, 0.0)
    (pred / "1.pgm").rename(pred / "9.pgm")
    assert main(["eval", f"pred={pred}", f"gt={gt}", "--out", str(tmp_path / "o")]) == 2


def test_eval_checkpoint_on_synth(trained, tmp_path):
    assert main(["eval", f"checkpoint={trained / 'final.ckpt'}", "frames=3", "size=16",
                 "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "eval.csv").read_text().splitlines()) == 1 + 3 + 1


# --- bench ----------------------------------------------------------------

def test_bench_tiny(tmp_path, capsys):
    assert main(["bench", "runs=10", "sweep=true", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "flops_match,true" in text
    rows = (tmp_path / "bench_sweep.csv").read_text().splitlines()[1:]
    assert {int(r.split(",")[1]) for r in rows} == {0, 1, 2, 4}
    assert all(r.split(",")[-1] == "0" for r in rows)


def test_sweep_increment_at_w8():
    for r in attention_core_sweep(240, windows=(8,)):
        assert r["increment"] == 4 * 240 * (2 * r["k"] * 64 + r["k"] ** 2)


# --- attnmap --------------------------------------------------------------

def test_map_helpers():
    np.testing.assert_array_equal(normalize_map(np.full((2, 2), 3.0)), 0.5)
    np.testing.assert_array_equal(normalize_map(np.array([[1.0, 3.0]])), [[0.0, 1.0]])
    up = upsample_map(np.array([[1, 2], [3, 4]]), 4, 6, 7)
    assert up.shape == (6, 7) and up[5, 6] == 4 and up[3, 3] == 1


def test_attnmap_extents(trained, lr_input, tmp_path):
    assert main(["attnmap", f"checkpoint={trained / 'final.ckpt'}", f"input={lr_input}", "--out", str(tmp_path)]) == 0
    amap = read_image(tmp_path / "attnmap.pgm")
    assert amap.shape == (1, 16, 16)


def test_attnmap_flat_for_constant_model_and_input(tmp_path):
    m = build(preset("tiny", pad_mode="circular"), 0)
    for p in m.parameters():
        p.data = np.full(p.shape, 0.01)
    x = np.full((1, 8, 8), 0.5)
    forward(m, T.tensor(np.repeat(x, 3, axis=0)), init_priors=True)
    save_checkpoint(tmp_path / "c.ckpt", m)
    write_image(tmp_path / "c.pgm", x)
    assert main(["attnmap", f"checkpoint={tmp_path / 'c.ckpt'}", f"input={tmp_path / 'c.pgm'}",
                 "--out", str(tmp_path / "o")]) == 0
    amap = read_image(tmp_path / "o" / "attnmap.pgm")
    assert np.unique(amap).size == 1


def test_attnmap_three_checkpoints(tmp_path, lr_input):
    paths = []
    for v in ("baseline", "static", "rpt"):
        m = build(preset("tiny", variant=v), 0)
        forward(m, T.tensor(np.repeat(read_image(lr_input), 3, axis=0)), init_priors=True)
        save_checkpoint(tmp_path / f"{v}.ckpt", m)
        paths.append(str(tmp_path / f"{v}.ckpt"))
    out = tmp_path / "o"
    assert main(["attnmap", f"checkpoints={','.join(paths)}", f"input={lr_input}", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert len(files) == 4 and "montage.pgm" in files
    assert read_image(out / "montage.pgm").shape == (1, 16, 3 * 16 + 4)


def test_attnmap_k0(tmp_path, lr_input, capsys):
    m = build(preset("tiny", k=0), 0)
    save_checkpoint(tmp_path / "k0.ckpt", m)
    assert main(["attnmap", f"checkpoint={tmp_path / 'k0.ckpt'}", f"input={lr_input}", "--out", str(tmp_path)]) == 2
    assert "k=0" in capsys.readouterr().err


# --- gradcheck ------------------------------------------------------------

def test_gradcheck_filter(capsys):
    assert main(["gradcheck", "--op", "softmax", "seeds=3"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("softmax") and "all 1 checks passed" in out


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--op", "nope"]) == 2


def test_gradcheck_detects_sign_flip(monkeypatch, capsys):
    good = T.BACKWARD["softmax"]
    monkeypatch.setitem(T.BACKWARD, "softmax", lambda node, g: [-d for d in good(node, g)])
    assert main(["gradcheck", "--op", "softmax", "seeds=2"]) == 1
    assert "softmax" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rptsr", "gradcheck", "--op", "gelu", "seeds=1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "gelu" in res.stdout
