import numpy as np
import pytest

from oracles import grad_check
from spcg.models import (
    MultiStageSOPA,
    OneStageSOPA,
    SLNEDecoder,
    SLNEEncoder,
    SOPAPosition,
    StagePrediction,
    build_network,
    ground_truth_resolver,
    lossy_threshold,
    reconstruct,
    round_half_away,
    sopa_multi_stage,
    sopa_one_stage,
    sopa_position,
)
from spcg.sparse_tensor import CoordSet, GroupingArrangement, SparseTensor, build_pyramid


def ones(cs):
    return SparseTensor(cs, np.ones((len(cs), 1)))


def blob(rng, scale=4, n=60):
    return CoordSet(rng.integers(0, 1 << scale, size=(n, 3)), scale)


def small(rng, **kw):
    cfg = dict(k=3, C=4, units=1, zero_head=False)
    cfg.update(kw)
    return cfg


def jitter_biases(net, rng):
    # keep ReLU pre-activations away from exact zeros so finite differences are smooth
    for p in net.parameters():
        if p.value.ndim == 1:
            p.value[:] = rng.normal(scale=0.3, size=p.value.shape)
    return net


def test_one_stage_zero_head_is_uniform():
    rng = np.random.default_rng(0)
    prev = blob(rng, 3, 20)
    pred = sopa_one_stage(ones(prev), OneStageSOPA(k=3, C=4, units=1))
    assert len(pred.coords) == 8 * len(prev)
    assert np.all(pred.probs == 0.5)
    assert CoordSet(pred.coords, 4) == prev.upscaled()


def test_one_stage_probabilities_in_range():
    rng = np.random.default_rng(1)
    net = OneStageSOPA(**small(rng))
    pred = net.predict(ones(blob(rng, 3, 30)))
    assert np.all((pred.probs > 0) & (pred.probs < 1))


def test_one_stage_gradients():
    rng = np.random.default_rng(2)
    net = jitter_biases(OneStageSOPA(**small(rng)), rng)
    x = ones(blob(rng, 3, 15))
    err = grad_check(net, x, rng, forward=lambda t: net.logits(t)[1][:, None],
                     backward=lambda g: net.backward_logits(g[:, 0]))
    assert err <= 1e-4


@pytest.mark.parametrize("stages", [3, 8])
def test_multi_stage_ground_truth_survivors(stages):
    rng = np.random.default_rng(stages)
    truth = blob(rng, 5, 150)
    prev = truth.downscaled()
    net = MultiStageSOPA(stages=stages, **small(rng))
    children = prev.upscaled()
    preds, surv = sopa_multi_stage(ones(prev), ground_truth_resolver(children.keys, truth), net)
    assert surv == truth
    assert len(preds) == stages
    # stages partition the candidates
    rows = np.concatenate([p.rows for p in preds])
    assert np.array_equal(np.sort(rows), np.arange(len(children)))
    arr = GroupingArrangement.of("three_stage" if stages == 3 else "eight_stage")
    ranks = arr.stage_of_rank()
    for s, p in enumerate(preds):
        assert np.all(ranks[children.keys[p.rows] & 7] == s)


def test_multi_stage_rejects_bad_stage_count():
    with pytest.raises(ValueError):
        MultiStageSOPA(stages=4)


def test_multi_stage_gradients_teacher_forced():
    rng = np.random.default_rng(5)
    truth = blob(rng, 4, 40)
    prev = truth.downscaled()
    net = jitter_biases(MultiStageSOPA(stages=3, **small(rng)), rng)
    keys = prev.upscaled().keys
    resolve = ground_truth_resolver(keys, truth)

    def fwd(t):
        _, _, outs = net.run(t, resolve, record=True)
        return np.concatenate([z for _, z, _ in outs])[:, None]

    def bwd(g):
        _, _, outs = net.run(ones(prev), resolve, record=True)
        sizes = np.cumsum([len(z) for _, z, _ in outs])[:-1]
        return net.backward_logits(np.split(g[:, 0], sizes))

    # many voxels share neighbourhoods, so use a small step to avoid crossing ReLU kinks
    assert grad_check(net, ones(prev), rng, h=1e-8, forward=fwd, backward=bwd) <= 1e-4


def test_slne_shapes_and_zero_features():
    rng = np.random.default_rng(6)
    pov = blob(rng, 5, 120)
    pyr = build_pyramid(pov)
    enc = SLNEEncoder(k=3, C=4, latent=3, units=1)
    dec = SLNEDecoder(k=3, C=4, latent=3, units=1)
    q = enc.encode(ones(pov))
    assert q.coordset == pyr[3]
    assert q.feats.shape == (len(pyr[3]), 3)
    assert np.array_equal(q.feats, np.round(q.feats))
    x = dec.features(q, pyr[4])
    assert x.feats.shape == (len(pyr[4]), 5) and np.all(x.feats[:, 0] == 1)
    z = dec.zero_features(pyr[4])
    assert np.all(z.feats[:, 1:] == 0)
    assert np.all(dec.scales() > 0)


def test_slne_decoder_rejects_foreign_target():
    rng = np.random.default_rng(7)
    dec = SLNEDecoder(k=3, C=4, latent=2, units=1)
    q = SparseTensor(CoordSet([(0, 0, 0)], 2), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        dec.features(q, CoordSet([(7, 7, 7)], 3))


def test_slne_gradients():
    rng = np.random.default_rng(8)
    pov = blob(rng, 4, 50)
    pyr = build_pyramid(pov)
    enc = jitter_biases(SLNEEncoder(k=3, C=4, latent=2, units=1, seed=3), rng)
    err = grad_check(enc, ones(pov), rng, forward=lambda t: enc.analysis(t).feats,
                     backward=enc.backward, check_input=False)
    assert err <= 1e-4
    dec = jitter_biases(SLNEDecoder(**small(rng, latent=2)), rng)
    q = SparseTensor(pyr[2], rng.normal(size=(len(pyr[2]), 2)))
    err = grad_check(dec, q, rng, forward=lambda t: dec.features(t, pyr[3]).feats[:, 1:],
                     backward=lambda g: dec.backward_features(np.hstack([np.zeros((len(g), 1)), g])))
    assert err <= 1e-4


def test_warm_start_reproduces_base_without_features():
    rng = np.random.default_rng(9)
    base = OneStageSOPA(**small(rng, seed=4))
    dec = SLNEDecoder(k=3, C=4, latent=2, units=1, zero_head=False)
    dec.warm_start(base)
    prev = blob(rng, 3, 25)
    _, z0 = base.logits(ones(prev))
    _, z1 = dec.sopa.logits(dec.zero_features(prev))
    assert np.allclose(z0, z1)
    with pytest.raises(ValueError):
        dec.warm_start(OneStageSOPA(k=3, C=8, units=1))


def test_position_offsets_in_block_units():
    rng = np.random.default_rng(10)
    net = SOPAPosition(k=3, C=4, units=1, zero_head=False)
    coarse = ones(blob(rng, 3, 10))
    raw = net.raw(coarse)
    pred = net.predict(coarse, 6)
    assert np.allclose(pred.offsets, raw * 8)
    assert sopa_position(coarse, net, 6).shape == (len(coarse), 3)
    with pytest.raises(ValueError):
        net.predict(coarse, 3)
    zero = SOPAPosition(k=3, C=4, units=1)
    assert np.array_equal(sopa_position(coarse, zero, 6), coarse.coords * 8)


def test_position_gradients():
    rng = np.random.default_rng(11)
    net = jitter_biases(SOPAPosition(**small(rng)), rng)
    x = ones(blob(rng, 3, 15))
    assert grad_check(net, x, rng, forward=net.raw, backward=net.backward, check_input=False) <= 1e-4


def test_lossy_threshold_ties_and_bounds():
    pred = StagePrediction(np.zeros((5, 3)), np.array([0.2, 0.9, 0.5, 0.9, 0.5]))
    assert lossy_threshold(pred, 0).tolist() == []
    assert lossy_threshold(pred, 2).tolist() == [1, 3]
    assert lossy_threshold(pred, 3).tolist() == [1, 2, 3]
    assert lossy_threshold(pred, 5).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        lossy_threshold(pred, 6)
    with pytest.raises(ValueError):
        StagePrediction(np.zeros((1, 3)), np.array([np.nan]))


def test_round_half_away_and_reconstruct():
    assert round_half_away(np.array([0.5, -0.5, 1.49, -2.5])).tolist() == [1, -1, 1, -3]
    out = reconstruct([[1, 2, 3]], [[0.5, -0.5, 3.6]], 4, 2)
    assert out.tolist() == [[5, 7, 15]]
    # clipped to the grid, duplicates kept
    out = reconstruct([[3, 3, 3], [3, 3, 3]], [[9, 9, 9], [9, 9, 9]], 4, 2)
    assert out.tolist() == [[15, 15, 15]] * 2


def test_build_network_unknown():
    with pytest.raises(ValueError, match="unknown arch"):
        build_network("nope")
    assert build_network("multistage_sopa_3", k=3, C=4, units=1).arch_id == "multistage_sopa_3"
