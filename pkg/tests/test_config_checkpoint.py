import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imcnet.config import RunConfig
from imcnet.errors import CheckpointError, ConfigError
from imcnet.model import IMCNet
from imcnet.tensor import checkpoint


def test_defaults():
    cfg = RunConfig()
    m = cfg.model
    assert (m.n, m.dt, m.key_channels, m.channels, m.cascade_depth) == (1, 4, 64, 64, 4)
    assert cfg.optim.iterations == 2000 and cfg.optim.batch_size == 4
    assert cfg.learning_rates() == {"encoder": 1e-6, "decoder": 1e-5, "mcm": 1e-4}
    assert (cfg.optim.beta1, cfg.optim.beta2) == (0.9, 0.999)


def test_lr_scale_multiplies_every_group():
    cfg = RunConfig.parse("optim.lr_scale = 10")
    assert cfg.learning_rates() == pytest.approx({"encoder": 1e-5, "decoder": 1e-4, "mcm": 1e-3})


def test_roundtrip_normalises():
    text = "# comment\n\n  optim.seed=3  \nmodel.encoder_channels = 8, 8,8,8\nmodel.channels = 8\n"
    cfg = RunConfig.parse(text)
    norm = cfg.dumps()
    assert RunConfig.parse(norm).dumps() == norm
    assert "model.encoder_channels = 8,8,8,8\n" in norm and "optim.seed = 3\n" in norm


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), lr=st.floats(1e-8, 1.0), depth=st.integers(1, 5),
       aug=st.booleans(), video=st.text(alphabet="abc/_-", max_size=10))
def test_roundtrip_property(seed, lr, depth, aug, video):
    cfg = RunConfig.parse(f"optim.seed = {seed}\noptim.lr_mcm = {lr!r}\nmodel.cascade_depth = {depth}\n"
                          f"optim.augment = {aug}\ndata.video = {video}")
    again = RunConfig.parse(cfg.dumps())
    assert again == cfg and again.dumps() == cfg.dumps()


@pytest.mark.parametrize("text,fragment", [
    ("optim.bogus = 1", "unknown config key"),
    ("model.n = one", "model.n"),
    ("model.cascade_depth = 7", "cascade_depth"),
    ("model.input_size = 60,64", "input_size"),
    ("model.channels = 32", "last encoder channel"),
    ("optim.seed = 1\noptim.seed = 2", "duplicate"),
    ("just words", "expected"),
])
def test_invalid_configs(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        RunConfig.parse(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.txt")


def _tiny(seed=0, depth=1):
    return IMCNet(key_channels=4, channels=8, cascade_depth=depth, encoder_channels=(4, 6, 8, 8), seed=seed)


def test_checkpoint_roundtrip(tmp_path):
    a, b = _tiny(0), _tiny(1)
    checkpoint.save(tmp_path / "a.imcw", a.state_dict())
    b.load_state_dict(checkpoint.load(tmp_path / "a.imcw"))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    assert checkpoint.dumps(a.state_dict()) == checkpoint.dumps(b.state_dict())


def test_incompatible_checkpoint_lists_entries():
    state = _tiny(0, depth=2).state_dict()
    with pytest.raises(CheckpointError, match="mcm.align.stages.1") as exc:
        _tiny(0, depth=1).load_state_dict(state)
    assert "unexpected" in str(exc.value)
    state = _tiny().state_dict()
    state["acm.proj_p.weight"] = np.zeros((2, 2, 1, 1), np.float32)
    with pytest.raises(CheckpointError, match=r"acm.proj_p.weight: checkpoint \(2, 2, 1, 1\)"):
        _tiny().load_state_dict(state)


def test_corrupt_checkpoints(tmp_path):
    blob = checkpoint.dumps({"w": np.ones((2, 3), np.float32)})
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob + b"\0"):
        with pytest.raises(CheckpointError):
            checkpoint.loads(bad)
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.imcw")
