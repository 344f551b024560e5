import numpy as np
import pytest

from gateadd.autodiff import AdamW, Mlp, Tensor
from gateadd.data import TaskDataset, assign_split
from gateadd.model import (DuplicateTaskError, GateModel, MtlModel, NetworkConfig, RegressionUnit,
                           SingleModel, UnknownTaskError, gate_detour, gate_forward, mtl_forward,
                           single_forward)
from gateadd.trainer import TrainConfig, train_single

SMALL = NetworkConfig(input_dim=5, backbone_hidden=7, embed_dim=6, latent_dim=4,
                      encoder_hidden=5, transfer_hidden=4)


def x_batch(n=9, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 5))


def test_default_shapes_follow_reference_network():
    cfg = NetworkConfig()
    m = GateModel.create(["a", "b"], cfg, seed=0)
    assert m.backbone.spec()["sizes"] == [16, 200, 100]
    u = m.unit("a")
    assert u.encoder.spec()["sizes"] == [100, 50, 50]
    assert u.transfer.spec()["sizes"] == [50, 50, 50]
    assert u.transfer.spec()["activations"] == ["tanh", "identity"]
    assert u.transfer.spec()["dropout"] == [0.2, 0.2]
    assert u.inverse_transfer.spec()["sizes"] == [50, 50, 50]
    assert u.head.spec()["sizes"] == [50, 1]
    assert u.head.spec()["dropout"] == [0.2]


def test_forward_shapes_and_finiteness():
    m = GateModel.create(["a", "b"], SMALL, seed=1)
    for task in m.tasks:
        out = gate_forward(m, task, x_batch())
        assert out.latent.shape == out.lf_point.shape == out.reconstruction.shape == (9, 4)
        assert out.prediction.shape == (9, 1)
        assert all(np.all(np.isfinite(t.data)) for t in out)
    assert gate_detour(m, "a", "b", x_batch()).shape == (9, 1)
    with pytest.raises(UnknownTaskError):
        gate_forward(m, "zzz", x_batch())
    with pytest.raises(Exception):
        gate_forward(m, "a", np.ones((3, 4)))


def test_identity_transfers_reconstruct_exactly():
    m = GateModel.create(["a", "b"], SMALL, seed=2)
    u = m.unit("a")
    u.transfer, u.inverse_transfer = Mlp.identity(4), Mlp.identity(4)
    out = gate_forward(m, "a", x_batch())
    assert np.array_equal(out.reconstruction.data, out.latent.data)


def test_detour_collapses_for_identical_pipelines():
    m = GateModel.create(["a", "b"], SMALL, seed=3)
    ua, ub = m.unit("a"), m.unit("b")
    ub.encoder = ua.encoder
    for u in (ua, ub):
        u.transfer, u.inverse_transfer = Mlp.identity(4), Mlp.identity(4)
    x = x_batch()
    np.testing.assert_array_equal(gate_detour(m, "a", "b", x).data, gate_forward(m, "b", x).prediction.data)


def test_detour_equals_manual_composition():
    m = GateModel.create(["a", "b"], SMALL, seed=4)
    x = Tensor(x_batch())
    ua, ub = m.unit("a"), m.unit("b")
    manual = ub.head(ub.inverse_transfer(ua.transfer(ua.encoder(m.backbone(x)))))
    np.testing.assert_array_equal(gate_detour(m, "a", "b", x.data).data, manual.data)
    with pytest.raises(ValueError):
        gate_detour(m, "a", "a", x.data)


def test_add_target_unit_freezes_everything_else():
    sources = [f"s{k}" for k in range(10)]
    m = GateModel.create(sources, SMALL, seed=5)
    before = m.num_parameters()
    unit = m.add_target_unit("t1", seed=9)
    assert len(m.source_tasks) == 10 and m.target_tasks == ["t1"]
    assert m.num_parameters() - before == unit.num_parameters()
    trainable = {id(p) for p in m.trainable_parameters()}
    assert trainable == {id(p) for net in unit.blocks().values() for p in net.parameters()}
    assert m.trainable_blocks() == m.unit_blocks("t1")
    with pytest.raises(DuplicateTaskError):
        m.add_target_unit("t1")
    with pytest.raises(DuplicateTaskError):
        m.add_target_unit("s3")


def test_frozen_source_unit_invariant_under_addition_training():
    m = GateModel.create(["a", "b"], SMALL, seed=6)
    m.add_target_unit("t", seed=1)
    x = x_batch()
    ref = gate_forward(m, "a", x)
    opt = AdamW(m.trainable_parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        opt.zero_grad()
        out = m.forward("t", x, "train", rng)
        (out.prediction.square().mean() + (out.lf_point - m.lf_point("a", m.embed(x))).square().mean()).backward()
        opt.step()
    after = gate_forward(m, "a", x)
    for a, b in zip(ref, after):
        assert np.array_equal(a.data, b.data)


def test_mtl_add_head_contract():
    m = MtlModel.create(["a", "b"], SMALL, seed=0)
    x = x_batch()
    latent_before = m.latent(x).data.copy()
    before = m.num_parameters()
    head = m.add_head("t", seed=3)
    assert m.num_parameters() - before == head.num_parameters()
    assert m.num_trainable_parameters() == head.num_parameters()
    assert mtl_forward(m, "t", x).shape == (9, 1)
    opt = AdamW(m.trainable_parameters(), lr=1e-2)
    for _ in range(20):
        opt.zero_grad()
        m.forward("t", x, "train", np.random.default_rng(0)).square().mean().backward()
        opt.step()
    assert np.array_equal(m.latent(x).data, latent_before)
    with pytest.raises(DuplicateTaskError):
        m.add_head("a")


def test_single_model_fits_constant_labels():
    n = 60
    ds = assign_split(TaskDataset(x_batch(n), {"c": np.full(n, 0.7)}), seed=0)
    # dropout off so the optimum is exactly reachable: every input maps to c
    net = NetworkConfig.from_dict({**SMALL.to_dict(), "head_dropout": 0.0})
    cfg = TrainConfig(learning_rate=3e-3, batch_size=64, epochs=1500, seed=0, validation_fold=None,
                      checkpoint_policy="last", weight_decay=0.0, network=net)
    rec = train_single(ds, "c", cfg)
    pred = single_forward(rec.model, ds.features).data
    assert np.max(np.abs(pred - 0.7)) < 1e-2


def test_task_ids_validated():
    with pytest.raises(ValueError):
        SingleModel.create("bad id!", SMALL)
    unit = RegressionUnit.create("ok", SMALL, np.random.default_rng(0))
    assert set(unit.blocks()) == set(RegressionUnit.PARTS)


def test_digest_tracks_parameter_changes():
    m = GateModel.create(["a", "b"], SMALL, seed=0)
    d = m.digest()
    m.unit("a").head.layers[0].bias.data[0] += 1e-12
    assert m.digest() != d
    assert m.digest(["backbone"]) == GateModel.create(["a", "b"], SMALL, seed=0).digest(["backbone"])
