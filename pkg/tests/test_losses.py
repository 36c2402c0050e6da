import numpy as np
import pytest

from fsatrain import numcore as nc
from fsatrain.data import DatasetConfig, default_mask_library
from fsatrain.errors import ConfigurationError, InputError
from fsatrain.losses import (LossVariant, Variant, active_stage, fsa_stage1, fsa_stage2, leakage, select_masks,
                             total_loss, transform)
from fsatrain.masks import AttentionMask, GaussianPeak, MaskLibrary


@pytest.fixture(autouse=True)
def f64():
    with nc.precision("float64"):
        yield


def T(x):
    return nc.Tensor(np.asarray(x, dtype=np.float64))


def lib_with(counts, raster=(4, 4), seed=0):
    rng = np.random.default_rng(seed)
    masks = [[AttentionMask((GaussianPeak(*rng.uniform(0.1, 0.9, 2), 0.15, 0.15),)) for _ in range(k)]
             for k in counts]
    return MaskLibrary([f"c{i}" for i in range(len(counts))], masks, raster)


def test_transform_is_sigmoid():
    x = np.linspace(-5, 5, 11)
    np.testing.assert_array_equal(transform(T(x)).data, nc.sigmoid(T(x)).data)


def test_leakage_examples():
    t = np.ones((1, 3, 2, 2))
    assert leakage(T(t), [0]).item() == 2.0
    t = np.ones((1, 5, 2, 2))
    assert leakage(T(t), [2]).item() == 4.0
    t = np.zeros((1, 5, 2, 2))
    t[0, 1, 0, 0] = 1.0
    t[0, 3, 1, 1] = 1.0
    assert leakage(T(t), [1]).item() == 0.0


def test_leakage_non_negative_and_per_sample_mean():
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(7, 5, 4, 4))
    labels = rng.integers(0, 5, 7)
    per = leakage(T(t), labels, per_sample=True).data
    assert np.all(per >= 0)
    assert leakage(T(t), labels).item() == nc.ordered_mean(per)


def test_leakage_needs_two_classes():
    with pytest.raises(ConfigurationError):
        leakage(T(np.zeros((1, 1, 2, 2))), [0])


def test_class_without_masks_contributes_zero_first_term():
    lib = lib_with([0, 1])
    cams = np.random.default_rng(1).normal(size=(3, 2, 4, 4))
    for fn in (fsa_stage1, fsa_stage2):
        _, bd = fn(T(cams), [0, 0, 0], lib, 0.2)
        assert bd.fsa_first == 0.0


def test_stage2_selects_closest_mask_and_ties_go_low():
    lib = lib_with([3, 1], seed=2)
    rasters = lib.rasters(0)
    sel = select_masks(rasters[[2, 1, 0]], lib, np.array([0, 0, 0]))
    assert sel.tolist() == [2, 1, 0]
    # identical masks: every distance ties
    same = MaskLibrary(["a", "b"], [[lib.masks[0][0]] * 3, lib.masks[1]], (4, 4))
    assert select_masks(np.full((1, 4, 4), 0.3), same, np.array([0])).tolist() == [0]
    assert select_masks(np.zeros((1, 4, 4)), lib, np.array([1])).tolist() == [0]


def test_stage2_argmin_recomputed_every_call():
    lib = lib_with([2, 1], seed=3)
    r = lib.rasters(0)
    logit = lambda p: np.log(np.clip(p, 1e-6, 1 - 1e-6) / (1 - np.clip(p, 1e-6, 1 - 1e-6)))  # noqa: E731
    for k in (0, 1, 0):
        cams = np.zeros((1, 2, 4, 4))
        cams[0, 0] = logit(r[k])
        assert fsa_stage2(T(cams), [0], lib)[1].selected.tolist() == [k]


def test_singleton_masks_make_stages_equal():
    lib = lib_with([1, 1, 1], seed=4)
    rng = np.random.default_rng(4)
    cams, labels = rng.normal(size=(6, 3, 4, 4)), rng.integers(0, 3, 6)
    a, b = fsa_stage1(T(cams), labels, lib)[0], fsa_stage2(T(cams), labels, lib)[0]
    assert np.array_equal(a.data, b.data)


def test_lambda_reg_zero_drops_leakage():
    lib = lib_with([2, 3], seed=5)
    cams = np.random.default_rng(5).normal(size=(4, 2, 4, 4))
    for fn in (fsa_stage1, fsa_stage2):
        loss, bd = fn(T(cams), [0, 1, 1, 0], lib, 0.0)
        assert loss.item() == bd.fsa_first
        assert bd.fsa_reg > 0


def test_batch_additivity():
    lib = lib_with([2, 3, 0], seed=6)
    rng = np.random.default_rng(6)
    cams, labels = rng.normal(size=(8, 3, 4, 4)), rng.integers(0, 3, 8)
    for fn in (fsa_stage1, fsa_stage2):
        whole = fn(T(cams), labels, lib)[0].item()
        halves = [fn(T(cams[s]), labels[s], lib)[0].item() for s in (slice(0, 4), slice(4, 8))]
        assert abs(whole - np.mean(halves)) < 1e-12


def test_resolution_mismatch():
    with pytest.raises(ConfigurationError, match="raster"):
        fsa_stage1(T(np.zeros((1, 2, 8, 8))), [0], lib_with([1, 1]))


def test_bad_labels():
    with pytest.raises(InputError):
        fsa_stage1(T(np.zeros((1, 2, 4, 4))), [2], lib_with([1, 1]))


def test_schedule():
    assert [active_stage(Variant.FSA_TWO_STAGE, e, 15) for e in (1, 15, 16, 30)] == [1, 1, 2, 2]
    assert active_stage(Variant.CE, 20, 15) == 0
    assert active_stage(Variant.FSA_STAGE1_ONLY, 30, 15) == 1
    assert active_stage(Variant.FSA_STAGE2_ONLY, 1, 15) == 2
    assert active_stage(Variant.CE_MSE, 30, 15) == 1
    with pytest.raises(ConfigurationError):
        active_stage(Variant.CE, 0, 15)


def test_total_loss_composition():
    lib = default_mask_library(DatasetConfig())
    rng = np.random.default_rng(7)
    cams, labels = rng.normal(size=(4, 5, 8, 8)), rng.integers(0, 5, 4)
    logits = nc.global_avg_pool(T(cams))
    ce = nc.softmax_cross_entropy(logits, labels).item()
    tot, bd = total_loss(LossVariant(Variant.CE), 3, logits, T(cams), labels, None)
    assert tot.item() == ce and bd.fsa_first == 0 and bd.fsa_reg == 0
    s1 = fsa_stage1(T(cams), labels, lib, 0.2)[0].item()
    s2 = fsa_stage2(T(cams), labels, lib, 0.2)[0].item()
    v = LossVariant(Variant.FSA_TWO_STAGE, 10.0, 0.2)
    assert abs(total_loss(v, 15, logits, T(cams), labels, lib)[0].item() - (ce + 10 * s1)) < 1e-12
    assert abs(total_loss(v, 16, logits, T(cams), labels, lib)[0].item() - (ce + 10 * s2)) < 1e-12
    tot, bd = total_loss(LossVariant(Variant.CE_MSE), 20, logits, T(cams), labels, lib)
    assert bd.fsa_reg == 0 and abs(tot.item() - (ce + 10 * bd.fsa_first)) < 1e-12


def test_fsa_variant_without_library():
    with pytest.raises(ConfigurationError):
        total_loss(LossVariant(), 1, T(np.zeros((1, 5))), T(np.zeros((1, 5, 8, 8))), [0], None)


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        LossVariant(lambda_fsa=-1)
