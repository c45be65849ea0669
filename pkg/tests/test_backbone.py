import numpy as np
import pytest

from conftest import small_phantom
from ichfusion.backbone import (
    BackboneConfig,
    ConvStage,
    Stage1Config,
    backbone_forward,
    backbone_loss,
    extract_descriptors,
    init_backbone,
    load_descriptors,
    same_padding,
    save_descriptors,
    train_stage1,
)
from ichfusion.errors import ConfigError, NumericalAbort, ShapeError, ValidationError
from ichfusion.numeric import LrSchedule, gradcheck_report
from ichfusion.phantom import generate_studies
from ichfusion.preprocessing import AugmentConfig
from ichfusion.sampler import Dataset
from ichfusion.training import AdamTrainer

TINY = BackboneConfig(input_size=(16, 16), stages=(ConvStage(4), ConvStage(8)))


def _params(cfg=TINY, seed=0):
    return init_backbone(cfg, np.random.default_rng(seed))


def _images(n=5, seed=1, size=16):
    return np.random.default_rng(seed).random((n, 3, size, size))


# ---------------------------------------------------------------- config and forward


def test_feature_shapes_use_ceil():
    assert same_padding(32, 3, 2) == (0, 1)
    assert BackboneConfig().feature_shape() == (64, 4, 4)
    assert BackboneConfig(input_size=(15, 17)).feature_shape() == (64, 2, 3)
    assert BackboneConfig(global_pool=True).feature_dim() == 64


@pytest.mark.parametrize(
    "kwargs",
    [{"num_classes": 5}, {"stages": ()}, {"stages": (ConvStage(4, kernel=2),)}, {"head_width": -1}],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = BackboneConfig(input_size=(16, 24), stages=(ConvStage(4, 5, 1), ConvStage(8)), head_width=12)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_head_gives_half():
    p = _params()
    p["head.weight"][:] = 0.0
    p["head.bias"][:] = 0.0
    np.testing.assert_array_equal(backbone_forward(_images(), p, TINY), 0.0)


def test_duplicates_and_permutation():
    p, x = _params(), _images(6)
    x[4] = x[1]
    out = backbone_forward(x, p, TINY)
    np.testing.assert_array_equal(out[4], out[1])
    perm = np.random.default_rng(2).permutation(6)
    np.testing.assert_allclose(backbone_forward(x[perm], p, TINY), out[perm], rtol=0, atol=1e-12)


def test_wrong_channel_count():
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((2, 1, 16, 16)), _params(), TINY)


@pytest.mark.parametrize("cfg", [TINY, BackboneConfig(input_size=(9, 11), stages=(ConvStage(3),), global_pool=True, head_width=5)])
def test_gradcheck(cfg):
    rng = np.random.default_rng(3)
    p = {k: (rng.normal(scale=0.1, size=v.shape) if k.endswith("bias") else v) for k, v in _params(cfg).items()}
    x, y = rng.random((3, 3, *cfg.input_size)), rng.random((3, 6))
    rep = gradcheck_report(lambda q: backbone_loss(q, x, y, cfg, signature=True), p, max_per_param=30, rng=rng)
    assert rep.max_error < 1e-5
    assert rep.n_kinks <= 0.1 * (rep.n_checked + rep.n_kinks)


# ---------------------------------------------------------------- training


def _dataset(n=2, **kw):
    return Dataset.from_studies(generate_studies(small_phantom(**kw), n))


def test_stage1_lr_trace_and_determinism():
    ds = _dataset()
    cfg = Stage1Config(epochs=2, blocks_per_batch=4, backbone=TINY)
    p1, log1 = train_stage1(ds, cfg, seed=7)
    p2, log2 = train_stage1(ds, cfg, seed=7)
    assert log1["lr_trace"][0] == 5e-4 and log1["lr_trace"][-1] == 0.0
    assert len(log1["lr_trace"]) == log1["total_steps"] + 1
    assert len(log1["epochs"]) == 2
    for k in p1:
        assert np.array_equal(p1[k], p2[k])
    p3, _ = train_stage1(ds, cfg, seed=8)
    assert not np.array_equal(p1["head.weight"], p3["head.weight"])


def test_stage1_overfits_one_study():
    ds = _dataset(1, slices=(16, 16), lesion_count_weights=(0, 0, 0, 1))
    steps_per_epoch = -(-16 // 8)
    backbone = BackboneConfig(input_size=(16, 16))
    cfg = Stage1Config(epochs=200 // steps_per_epoch, blocks_per_batch=8, augment=AugmentConfig(), backbone=backbone)
    _, log = train_stage1(ds, cfg, seed=0)
    assert log["total_steps"] == 200
    assert log["step_loss"][-1] <= 0.5 * log["step_loss"][0]


def test_stage1_checkpoint_hook_and_best_epoch():
    ds, val = _dataset(), _dataset(1, seed=99)
    seen = []
    cfg = Stage1Config(epochs=3, blocks_per_batch=8, backbone=TINY, augment=AugmentConfig())
    params, log = train_stage1(ds, cfg, 1, val_dataset=val, on_epoch=lambda e, p, r: seen.append((e, p, r)))
    assert [e for e, _, _ in seen] == [1, 2, 3]
    best = min(seen, key=lambda s: s[2]["val_loss"])
    assert log["best_epoch"] == best[0]
    for k in params:
        assert np.array_equal(params[k], best[1][k])


def test_stage1_input_size_mismatch():
    with pytest.raises(ConfigError, match="input_size"):
        train_stage1(_dataset(), Stage1Config(epochs=1), seed=0)


def test_trainer_aborts_on_nan():
    tr = AdamTrainer({"w": np.zeros(2)}, LrSchedule(total_steps=4))
    tr.update(1.0, {"w": np.ones(2)})
    with pytest.raises(NumericalAbort) as info:
        tr.update(float("nan"), {"w": np.ones(2)})
    assert info.value.step == 1 and info.value.lr > 0
    with pytest.raises(NumericalAbort):
        tr.update(1.0, {"w": np.array([np.inf, 0.0])})


# ---------------------------------------------------------------- descriptors


def test_extract_descriptors(tmp_path):
    ds = _dataset(3)
    p = _params()
    desc = extract_descriptors(ds, p, TINY)
    assert list(desc) == ds.study_ids
    for i, sid in enumerate(ds.study_ids):
        assert desc[sid].shape == (ds.n_slices(i), 6)
        assert desc[sid].min() >= 0.0 and desc[sid].max() <= 1.0
    threaded = extract_descriptors(ds, p, TINY, workers=3)
    for sid in desc:
        assert np.array_equal(desc[sid], threaded[sid])
    save_descriptors(tmp_path / "a.json", desc)
    save_descriptors(tmp_path / "b.json", extract_descriptors(ds, p, TINY))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = load_descriptors(tmp_path / "a.json")
    for sid in desc:
        assert np.array_equal(back[sid], desc[sid])


def test_load_descriptors_validation(tmp_path):
    path = tmp_path / "d.json"
    path.write_text('{"s": [[0.1, 0.2]]}')
    with pytest.raises(ValidationError, match="s"):
        load_descriptors(path)
    path.write_text('{"s": [[0.1, 0.2, 0.3, 0.4, 0.5, 1.5]]}')
    with pytest.raises(ValidationError, match="outside"):
        load_descriptors(path)
