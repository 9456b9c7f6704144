import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from imcnet.cli import main
from imcnet.config import RunConfig
from imcnet.data import generate_synthetic, write_davis
from imcnet.model import IMCNet
from imcnet.train import build_model, infer_sequence, thread_count, train

TINY = """model.key_channels = 4
model.channels = 8
model.encoder_channels = 4,6,8,8
model.cascade_depth = 1
optim.batch_size = 2
optim.iterations = 10
optim.checkpoint_every = 5
data.synthetic_count = 4
data.synthetic_frames = 5
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY + f"output.dir = {tmp_path / 'run'}\n")
    return path


def test_param_groups_partition_parameters():
    m = IMCNet(key_channels=4, channels=8, cascade_depth=1, encoder_channels=(4, 6, 8, 8))
    groups = m.param_groups()
    assert set(groups) == {"encoder", "decoder", "mcm"}
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids)) == len(m.parameters())


def test_train_writes_artifacts(tiny_cfg, tmp_path):
    res = train(RunConfig.load(tiny_cfg))
    run = tmp_path / "run"
    lines = (run / "loss.log").read_text().splitlines()
    assert len(lines) == 10 == res.iterations
    rec = json.loads(lines[0])
    assert {"iter", "total", "final", "bce", "ssim", "iou"} <= set(rec)
    assert (run / "checkpoint_000005.imcw").is_file() and (run / "checkpoint_000010.imcw").is_file()
    assert (run / "final.imcw").is_file() and (run / "config.txt").is_file()
    assert RunConfig.load(run / "config.txt") == RunConfig.load(tiny_cfg)


def test_train_is_deterministic(tmp_path):
    blobs = []
    for k in range(2):
        cfg = RunConfig.parse(TINY)
        cfg.optim.iterations = 3
        res = train(cfg, out_dir=tmp_path / f"r{k}")
        blobs.append(res.checkpoint.read_bytes())
    assert blobs[0] == blobs[1]


def test_joint_schedule_used_with_images(tmp_path):
    (tmp_path / "img" / "images").mkdir(parents=True)
    (tmp_path / "img" / "masks").mkdir()
    for i in range(4):
        Image.fromarray(np.full((64, 64, 3), 30 * i, np.uint8)).save(tmp_path / "img" / "images" / f"{i}.png")
        Image.fromarray(np.eye(64, dtype=np.uint8) * 255).save(tmp_path / "img" / "masks" / f"{i}.png")
    cfg = RunConfig.parse(TINY + f"data.image = {tmp_path / 'img'}\n")
    cfg.optim.iterations = 4
    res = train(cfg, out_dir=tmp_path / "run")
    assert [r["kind"] for r in res.history] == ["video", "image", "video", "image"]


def test_bad_dataset_fails_before_training(tmp_path):
    cfg = RunConfig.parse(TINY + f"data.video = {tmp_path / 'missing'}\n")
    with pytest.raises(Exception) as exc:
        train(cfg, out_dir=tmp_path / "run")
    assert getattr(exc.value, "code", "") == "E_DATA"
    assert not (tmp_path / "run").exists()


def test_thread_env(monkeypatch):
    monkeypatch.delenv("IMC_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("IMC_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("IMC_THREADS", "zero")
    with pytest.raises(ValueError):
        thread_count()


def test_infer_clamps_boundaries():
    cfg = RunConfig.parse(TINY)
    model = build_model(cfg)
    (seq,) = generate_synthetic(seed=0, count=1, frames=5)
    probs = infer_sequence(model, seq, cfg.model.n, cfg.model.dt)
    assert probs.shape == (5, 64, 64)
    assert ((probs > 0) & (probs < 1)).all()


# -- CLI

def test_cli_train_synth_infer_eval(tiny_cfg, tmp_path, capsys):
    assert main(["train", "--config", str(tiny_cfg), "--seed", "2", "--lr-scale", "2"]) == 0
    saved = RunConfig.load(tmp_path / "run" / "config.txt")
    assert saved.optim.seed == 2 and saved.optim.lr_scale == 2.0
    synth_cfg = tmp_path / "synth.txt"
    synth_cfg.write_text("count = 1\nframes = 5\nseed = 4\n")
    assert main(["synth", "--config", str(synth_cfg), "--out", str(tmp_path / "ds")]) == 0
    frames = tmp_path / "ds" / "JPEGImages" / "synth000"
    ckpt = tmp_path / "run" / "final.imcw"
    outs = []
    for k in range(2):
        out = tmp_path / f"pred{k}"
        assert main(["infer", "--config", str(tiny_cfg), "--checkpoint", str(ckpt),
                     "--input", str(frames), "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == [f"{i:05d}.png" for i in range(5)]
    for name in names:
        a = np.asarray(Image.open(outs[0] / name))
        assert a.dtype == np.uint8 and set(np.unique(a)) <= {0, 255}
        assert (outs[1] / name).read_bytes() == (outs[0] / name).read_bytes()
    assert main(["infer", "--config", str(tiny_cfg), "--checkpoint", str(ckpt), "--probs",
                 "--input", str(tmp_path / "ds"), "--out", str(tmp_path / "probs")]) == 0
    assert len(list((tmp_path / "probs" / "synth000").iterdir())) == 5
    gt = tmp_path / "ds" / "Annotations"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "rep")]) == 0
    summary = json.loads((tmp_path / "rep.jsonl").read_text().splitlines()[-1])
    assert summary["J_mean"] == 1.0 and summary["F_mean"] == 1.0


def test_cli_bench_two_sizes(capsys):
    assert main(["bench", "--kernel", "deformable_conv", "--sizes", "8,12", "--channels", "4"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.startswith("deformable_conv")]
    assert len(rows) == 2
    assert all(float(r.split("ns/elem=")[1]) > 0 for r in rows)


def test_cli_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "sigmoid", "--seeds", "2"]) == 0
    assert capsys.readouterr().out.startswith("PASS sigmoid")


@pytest.mark.parametrize("argv,code", [
    (["train", "--config", "/nonexistent.txt"], "E_CONFIG"),
    (["gradcheck", "--op", "nope"], "E_CONFIG"),
    (["bench", "--kernel", "fft", "--sizes", "8"], "E_CONFIG"),
    (["bench", "--kernel", "conv2d", "--sizes", "a,b"], "E_CONFIG"),
    (["eval", "--pred", "/nonexistent", "--gt", "/nonexistent", "--out", "/tmp/x"], "E_DATA"),
])
def test_cli_errors_single_line(argv, code, capsys):
    assert main(argv) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(code + ": ")


def test_cli_infer_errors(tiny_cfg, tmp_path, capsys):
    cfg4 = tmp_path / "l2.txt"
    cfg4.write_text(TINY.replace("cascade_depth = 1", "cascade_depth = 2"))
    ckpt = tmp_path / "l2.imcw"
    from imcnet.tensor import checkpoint
    checkpoint.save(ckpt, build_model(RunConfig.load(cfg4)).state_dict())
    write_davis(generate_synthetic(seed=0, count=1, frames=2), tmp_path / "ds")
    base = ["infer", "--config", str(tiny_cfg), "--checkpoint", str(ckpt),
            "--input", str(tmp_path / "ds"), "--out", str(tmp_path / "o")]
    assert main(base) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("E_CHECKPOINT: ") and "mcm.align.stages.1" in err and "\n" not in err
    assert main(base + ["--tta"]) != 0
    assert capsys.readouterr().err.startswith("E_CONFIG: --tta")


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "imcnet.cli", "gradcheck", "--op", "nope"],
                         capture_output=True, text=True)
    assert out.returncode != 0 and out.stderr.startswith("E_CONFIG: ")
