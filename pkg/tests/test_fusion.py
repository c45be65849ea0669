import numpy as np
import pytest

from conftest import small_phantom
from ichfusion.backbone import BackboneConfig, ConvStage, extract_descriptors, init_backbone
from ichfusion.errors import ConfigError, ShapeError
from ichfusion.fusion import (
    FusionConfig,
    Stage2Config,
    assemble_fusion_input,
    assemble_study_inputs,
    fusion_forward,
    fusion_loss,
    init_fusion,
    predict_from_descriptors,
    predict_study,
    train_stage2,
)
from ichfusion.numeric import gradcheck_report, sigmoid
from ichfusion.phantom import NeighborConsistencyConfig, generate_studies, neighbor_consistency_dataset
from ichfusion.sampler import Dataset
from ichfusion.training import DEFAULT_CLASS_WEIGHTS

W = np.asarray(DEFAULT_CLASS_WEIGHTS)
CFG = FusionConfig()


def _desc(n=10, seed=0):
    return np.random.default_rng(seed).random((n, 6))


# ---------------------------------------------------------------- input assembly


def test_assemble_interior_and_edge():
    d = _desc()
    np.testing.assert_array_equal(assemble_fusion_input(d, 5)[:, :, 0], d[2:9])
    edge = assemble_fusion_input(d, 0)[:, :, 0]
    assert edge.shape == (7, 6)
    for r in range(4):
        np.testing.assert_array_equal(edge[r], d[0])
    np.testing.assert_array_equal(edge[4:], d[1:4])


def test_assemble_shape_and_centre_row():
    d = _desc(3)
    x = assemble_study_inputs(d)
    assert x.shape == (3, 7, 6, 1)
    for c in range(3):
        np.testing.assert_array_equal(x[c, 3, :, 0], d[c])


def test_assemble_out_of_range():
    with pytest.raises(IndexError):
        assemble_fusion_input(_desc(4), 4)


# ---------------------------------------------------------------- forward


def test_zero_params_give_half():
    p = {k: np.zeros_like(v) for k, v in init_fusion(CFG, np.random.default_rng(0)).items()}
    out = sigmoid(fusion_forward(assemble_study_inputs(_desc()), p, CFG))
    np.testing.assert_array_equal(out, 0.5)


def test_identical_inputs_identical_outputs():
    p = init_fusion(CFG, np.random.default_rng(1))
    x = assemble_study_inputs(_desc())
    x[7] = x[2]
    out = fusion_forward(x, p, CFG)
    np.testing.assert_array_equal(out[7], out[2])


def test_shape_error():
    p = init_fusion(CFG, np.random.default_rng(1))
    with pytest.raises(ShapeError):
        fusion_forward(np.zeros((2, 5, 6, 1)), p, CFG)


@pytest.mark.parametrize("kwargs", [{"conv1_kernel": 2}, {"activation": "tanh"}, {"num_classes": 7}, {"conv2_channels": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        FusionConfig(**kwargs)


def test_architecture_has_two_convs_one_dense():
    p = init_fusion(CFG, np.random.default_rng(0))
    assert sorted(p) == ["conv1.bias", "conv1.weight", "conv2.bias", "conv2.weight", "dense.bias", "dense.weight"]
    assert p["dense.weight"].shape == (7 * 6 * 32, 6)


def test_gradcheck():
    rng = np.random.default_rng(2)
    p = {k: (rng.normal(scale=0.1, size=v.shape) if k.endswith("bias") else v) for k, v in init_fusion(CFG, rng).items()}
    x, y = rng.random((3, 7, 6, 1)), rng.random((3, 6))
    rep = gradcheck_report(lambda q: fusion_loss(q, x, y, CFG, signature=True), p, max_per_param=40, rng=rng)
    assert rep.max_error < 1e-5


# ---------------------------------------------------------------- training


def test_identity_mappable_reaches_entropy_floor():
    # soft targets equal to the descriptors: the best achievable weighted BCE is their entropy
    rng = np.random.default_rng(0)
    desc = {f"s{k}": rng.uniform(0.05, 0.95, size=(int(rng.integers(10, 20)), 6)) for k in range(20)}
    p, _ = train_stage2(desc, desc, Stage2Config(epochs=60, lr=5e-3, batch_size=32), seed=0)
    y = np.concatenate(list(desc.values()))
    f = np.concatenate([predict_from_descriptors(d, p, CFG) for d in desc.values()])
    floor = float(np.mean(-(y * np.log(y) + (1 - y) * np.log(1 - y)) @ W))
    got = float(np.mean(-(y * np.log(f) + (1 - y) * np.log(1 - f)) @ W))
    assert got <= 1.1 * floor


def test_stage2_deterministic():
    desc, labels = neighbor_consistency_dataset(NeighborConsistencyConfig(n_studies=4), seed=3)
    cfg = Stage2Config(epochs=2)
    p1, log1 = train_stage2(desc, labels, cfg, 5)
    p2, _ = train_stage2(desc, labels, cfg, 5)
    for k in p1:
        assert np.array_equal(p1[k], p2[k])
    assert log1["lr_trace"][0] == 5e-4 and log1["lr_trace"][-1] == 0.0


def test_stage2_label_mismatch():
    desc, labels = neighbor_consistency_dataset(NeighborConsistencyConfig(n_studies=2), seed=3)
    labels.pop(next(iter(labels)))
    with pytest.raises(KeyError):
        train_stage2(desc, labels, Stage2Config(epochs=1), 0)


# ---------------------------------------------------------------- inference


def test_prediction_locality():
    p = init_fusion(CFG, np.random.default_rng(4))
    d = _desc(20)
    base = predict_from_descriptors(d, p, CFG)
    moved = d.copy()
    moved[15:] = 1.0 - moved[15:]  # outside the block of slice 8 (5..11)
    out = predict_from_descriptors(moved, p, CFG)
    np.testing.assert_array_equal(out[:12], base[:12])
    assert not np.array_equal(out[15:], base[15:])


def test_predict_study_equals_manual_composition():
    studies = generate_studies(small_phantom(), 2)
    bcfg = BackboneConfig(input_size=(16, 16), stages=(ConvStage(4), ConvStage(8)))
    bp = init_backbone(bcfg, np.random.default_rng(5))
    fp = init_fusion(CFG, np.random.default_rng(6))
    desc = extract_descriptors(Dataset.from_studies(studies), bp, bcfg)
    for st in studies:
        out = predict_study(st, bp, bcfg, fp, CFG)
        manual = sigmoid(fusion_forward(assemble_study_inputs(desc[st.study_id]), fp, CFG))
        assert out.shape == (st.n_slices, 6)
        assert np.array_equal(out, manual)
        assert out.min() > 0.0 and out.max() < 1.0
