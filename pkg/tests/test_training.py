import math

import numpy as np
import pytest

from spcg.modelfile import to_bytes
from spcg.training import (
    KINDS,
    Schedule,
    TrainingDiverged,
    TrainingSample,
    augment,
    bce_logits,
    load_dataset,
    loss_bce,
    loss_combined,
    loss_mse,
    make_networks,
    position_targets,
    read_manifest,
    synth_cloud,
    train,
    write_log,
    write_manifest,
)

TINY = dict(k=3, C=4, units=1)


@pytest.mark.parametrize("kind", KINDS)
def test_synth_deterministic_and_in_range(kind):
    a = synth_cloud(kind, 6, 7)
    b = synth_cloud(kind, 6, 7)
    assert a.same_points(b) and len(a) > 10
    assert a.points.min() >= 0 and a.points.max() < 64
    assert not a.same_points(synth_cloud(kind, 6, 8))


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_cloud("torus", 6, 0)
    with pytest.raises(ValueError):
        synth_cloud("sphere_shell", 12, 0)


def test_augment_shrinks_and_dedups():
    c = synth_cloud("box_surface", 6, 1)
    out = augment(c, np.random.default_rng(0), s=0.5)
    assert out.points.max() <= 32 and len(out) <= len(c)
    assert out.original_count == len(out)


def test_manifest_roundtrip(tmp_path):
    recs = [{"kind": "sphere_shell", "N": 6, "seed": 1}, {"kind": "union", "N": 7, "seed": 2, "size": 0.4}]
    path = tmp_path / "m.ndjson"
    write_manifest(path, recs)
    assert read_manifest(path) == recs
    assert len(load_dataset(recs)) == 2
    path.write_text('{"kind": "x"}\n')
    with pytest.raises(ValueError, match="line 1"):
        read_manifest(path)


def test_bce_values():
    assert loss_bce([0.5], [1]) == pytest.approx(1.0)
    assert loss_bce([0.0], [1]) == pytest.approx(-math.log2(1e-6))
    assert loss_bce([0.9, 0.1], [1, 0]) == pytest.approx(-2 * math.log2(0.9))
    z = np.array([-3.0, 0.0, 2.5])
    o = np.array([0.0, 1.0, 1.0])
    bits, dz = bce_logits(z, o)
    assert bits == pytest.approx(loss_bce(1 / (1 + np.exp(-z)), o))
    h = 1e-6
    num = [(bce_logits(z + h * e, o)[0] - bce_logits(z - h * e, o)[0]) / (2 * h) for e in np.eye(3)]
    assert np.allclose(dz, num, atol=1e-8)


def test_loss_combined_and_mse():
    lv = loss_combined([0.5, 0.5], [0, 1], np.zeros((3, 2)), [1.0, 1.0], w=0.5)
    assert lv.bce == pytest.approx(2.0)
    assert lv.total == pytest.approx(2.0 + 0.5 * lv.feature_rate)
    assert lv.feature_rate == pytest.approx(6 * -math.log2(1 - math.exp(-0.5)))
    assert loss_mse([[0, 0, 0], [1, 1, 1]], [[0, 0, 1], [1, 1, 1]]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        loss_mse(np.zeros((0, 3)), np.zeros((0, 3)))


def test_position_targets_in_block_units():
    s = TrainingSample(synth_cloud("line_scan", 6, 0))
    coarse, tgt = position_targets(s, 3)
    assert tgt.shape == (len(coarse), 3)
    assert np.all(tgt > -1) and np.all(tgt < 2)


@pytest.mark.parametrize("arch", ["one_stage_sopa", "multistage_sopa_3", "slne", "sopa_position"])
def test_training_reduces_loss(arch):
    data = [synth_cloud(k, 5, i, size=0.5) for i, k in enumerate(["sphere_shell", "box_surface",
                                                                   "plane_patch", "line_scan"] * 2)]
    cfg = dict(TINY, latent=2) if arch == "slne" else dict(TINY)
    train(arch, data, Schedule(epochs=6, batch=4, lr_start=5e-3, lr_end=1e-3, augment=False), config=cfg)
    log = train.last_log
    key = "mse" if arch == "sopa_position" else "bce"
    assert log[-1][key] < log[0][key]
    assert all(math.isfinite(r["total"]) for r in log)


def test_training_is_deterministic(tmp_path):
    data = [synth_cloud("union", 5, i, size=0.5) for i in range(3)]
    sch = Schedule(epochs=2, batch=2, seed=4)
    a = train("multistage_sopa_8", data, sch, config=TINY)["multistage_sopa_8"]
    b = train("multistage_sopa_8", data, sch, config=TINY)["multistage_sopa_8"]
    assert to_bytes(a) == to_bytes(b)
    write_log(tmp_path / "log.csv", train.last_log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,total,bce,feature_rate,mse,lr" and len(lines) == 3


def test_divergence_detected():
    data = [synth_cloud("sphere_shell", 5, 0, size=0.5)]
    nets = make_networks("one_stage_sopa", **TINY)
    nets["one_stage_sopa"].ool.parameters()[0].value[...] = np.nan
    with pytest.raises(TrainingDiverged):
        train("one_stage_sopa", data, Schedule(epochs=1, batch=1), nets=nets)


def test_make_networks():
    assert set(make_networks("slne", **TINY)) == {"slne_encoder", "slne_decoder"}
    with pytest.raises(ValueError):
        make_networks("bogus")
    base = make_networks("one_stage_sopa", **TINY)["one_stage_sopa"]
    nets = make_networks("slne", base=base, units=1, latent=2)
    assert nets["slne_decoder"].C == 4
