import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from btnet.autodiff import Tape, const
from btnet.channels import RepChannels
from btnet.geometry import random_rotation, random_rotations, rotation_from_axis_angle, unit
from btnet.models import (CKPT_MAGIC, EMBED_DIM, PFN_NUMERIC_FEATURES, Batch, CheckpointError, ConfigError,
                          ModelConfig, btn_forward, btn_forward_reference, btn_inputs, btn_phi, build_model,
                          detector_coordinates, impact_projections, invariant_readout, load_checkpoint, log_magnitude,
                          pfn_inputs, save_checkpoint, seed_tensors)

from helpers import LADDER_FLAGS, batch_of, small_model
from strategies import seeds


@pytest.fixture(scope="module")
def batch():
    return batch_of(20, seed=4)


def axis_rotations(batch, rng):
    return np.stack([rotation_from_axis_angle(j, a).m for j, a in zip(batch.jhat, rng.uniform(0, 2 * np.pi, len(batch)))])


# --- inputs -------------------------------------------------------------------------

def test_seed_tensors_basis_vectors():
    T = seed_tensors(np.eye(3))
    assert T.shape == (9, 3, 3)
    for k in range(9):
        expected = np.zeros((3, 3))
        expected[k // 3, k % 3] = 1.0
        np.testing.assert_array_equal(T[k], expected)
    assert np.all(seed_tensors(np.zeros((3, 3))) == 0)


@given(seeds)
def test_seed_tensors_covariant(seed):
    rng = np.random.default_rng(seed)
    R, v = random_rotation(rng).m, rng.normal(size=(3, 3))
    np.testing.assert_allclose(seed_tensors(v @ R.T), R @ seed_tensors(v) @ R.T, atol=1e-12)


def test_log_magnitude_keeps_direction(rng):
    v = rng.normal(size=(10, 3)) * 50
    out = log_magnitude(v, 100.0)
    np.testing.assert_allclose(np.cross(out, v), 0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.log1p(np.linalg.norm(v, axis=1) / 100))
    assert np.all(log_magnitude(np.zeros((2, 3)), 1.0) == 0)


def test_baseline_feature_dimension_is_twelve(batch):
    """[PAPER] the baseline sees F = 12 features per particle."""
    assert PFN_NUMERIC_FEATURES + EMBED_DIM == 12
    model = build_model(ModelConfig(model_class="baseline_pfn"))
    assert model.store.view("phi0.W").shape[1] == 12
    assert pfn_inputs(model.cfg, batch).shape[-1] + EMBED_DIM == 12


def test_detector_coordinates_oracle():
    p = np.array([3.0, 4.0, 5.0])
    pt, eta, phi = detector_coordinates(p)
    theta = np.arccos(5 / np.sqrt(50))
    assert pt == 5.0
    assert eta == pytest.approx(-np.log(np.tan(theta / 2)))
    assert phi == pytest.approx(np.arctan2(4, 3))


def test_impact_projections_oracle():
    """A line parallel to z at transverse offset (0, 2): |d0| = 2, z0 = the a_z of the point."""
    d0, z0 = impact_projections(np.array([0.0, 2.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    assert abs(d0) == pytest.approx(2.0) and z0 == pytest.approx(0.0)
    d0, z0 = impact_projections(np.array([1.0, 0.0, 0.5]), np.array([0.0, 3.0, 4.0]))
    assert abs(d0) == pytest.approx(1.0) and z0 == pytest.approx(0.5)


def test_btn_inputs_masked(batch):
    cfg = ModelConfig()
    q, v, T = btn_inputs(cfg, batch)
    assert q.shape[-1] == 1 and v.shape[-2:] == (3, 3) and T.shape[-3:] == (9, 3, 3)
    assert np.all(v[~batch.mask] == 0) and np.all(T[~batch.mask] == 0)
    assert btn_inputs(ModelConfig(model_class="vector"), batch)[2] is None


# --- phi and readout ------------------------------------------------------------------

def phi_inputs(rng, B=3, P=4):
    s = rng.normal(size=(B, P, 4))
    v = rng.normal(size=(B, P, 3, 3))
    return s, v, seed_tensors(v)


@pytest.mark.parametrize("model_class,bil", [("vector", False), ("tensor", False), ("tensor", True), ("vector", True)])
def test_phi_so3_equivariant_without_so2(model_class, bil, rng):
    model = small_model(model_class, bil, False)
    s, v, T = phi_inputs(rng)
    T = T if model.cfg.has_tensors else None
    jhat = unit(rng.normal(size=(3, 3)))

    def run(s, v, T):
        out = btn_phi(Tape(False), model.cfg, model.store, const(s), const(v), None if T is None else const(T), jhat)
        return [None if x is None else x.value for x in out]

    base = run(s, v, T)
    assert [x.shape[-1] if i == 0 else x.shape[2] for i, x in enumerate(base) if x is not None] == \
        [8] * (3 if T is not None else 2)
    for _ in range(10):
        R = random_rotation(rng).m
        rot = run(s, v @ R.T, None if T is None else R @ T @ R.T)
        assert np.max(np.abs(rot[0] - base[0])) < 1e-9
        assert np.max(np.abs(rot[1] - base[1] @ R.T)) < 1e-9
        if T is not None:
            assert np.max(np.abs(rot[2] - R @ base[2] @ R.T)) < 1e-9


@pytest.mark.parametrize("model_class", ["vector", "tensor"])
def test_phi_axis_equivariant_with_so2(model_class, rng):
    model = small_model(model_class, True, True)
    s, v, T = phi_inputs(rng, B=1)
    T = T if model.cfg.has_tensors else None
    j = unit(rng.normal(size=3))

    def run(s, v, T):
        out = btn_phi(Tape(False), model.cfg, model.store, const(s), const(v), None if T is None else const(T), j[None])
        return [None if x is None else x.value for x in out]

    base = run(s, v, T)
    for alpha in rng.uniform(0, 2 * np.pi, 10):
        R = rotation_from_axis_angle(j, alpha).m
        rot = run(s, v @ R.T, None if T is None else R @ T @ R.T)
        assert np.max(np.abs(rot[1] - base[1] @ R.T)) < 1e-9
        if T is not None:
            assert np.max(np.abs(rot[2] - R @ base[2] @ R.T)) < 1e-9
    # and it is not equivariant under a generic rotation
    R = random_rotation(np.random.default_rng(1)).m
    assert np.max(np.abs(run(s, v @ R.T, None if T is None else R @ T @ R.T)[1] - base[1] @ R.T)) > 1e-6


def test_invariant_readout_contract(rng):
    c = RepChannels(rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 1, 4, 3)), rng.normal(size=(2, 1, 5, 3, 3)))
    out = invariant_readout(c)
    assert out.shape == (2, 1, 12)
    np.testing.assert_allclose(out[..., 3:7], np.sum(c.vectors ** 2, -1))
    R = random_rotation(rng).m
    rot = RepChannels(c.scalars, c.vectors @ R.T, R @ c.tensors @ R.T)
    assert np.max(np.abs(invariant_readout(rot) - out)) < 1e-9
    assert np.all(invariant_readout(RepChannels.empty(1, 1)) == 0)
    zero = RepChannels(np.zeros((1, 1, 2)), np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3, 3)))
    assert np.all(invariant_readout(zero) == 0)


# --- full forward ----------------------------------------------------------------------

@pytest.mark.parametrize("flags", LADDER_FLAGS, ids=lambda f: "+".join(str(x) for x in f))
def test_btn_global_rotation_invariance(flags, batch):
    model = small_model(*flags)
    base = model.logits(batch)
    assert np.ptp(base[:, 1] - base[:, 0]) > 1e-8           # not a constant function
    for R in random_rotations(np.random.default_rng(2), 10):
        assert np.max(np.abs(model.logits(batch.rotated(R)) - base)) < 1e-6


@pytest.mark.parametrize("model_class", ["vector", "tensor"])
def test_btn_axis_rotation_invariance(model_class, batch):
    model = small_model(model_class, True, True)
    base = model.logits(batch)
    rng = np.random.default_rng(5)
    for _ in range(10):
        assert np.max(np.abs(model.logits(batch.rotated(axis_rotations(batch, rng))) - base)) < 1e-6


@given(st.permutations(range(8)))
@settings(max_examples=10)
def test_permutation_invariance(perm):
    b = batch_of(6, seed=2, mean_tracks=5.0)
    b = Batch.from_dataset(__import__("helpers").events(6, seed=2, mean_tracks=5.0), trim=False)
    full = list(perm) + list(range(8, b.mask.shape[1]))
    for model in (small_model("tensor", True, True), small_model("baseline_pfn", generic=False)):
        if model.cfg.is_pfn:
            model.store.view("out.W")[...] = np.random.default_rng(0).normal(size=model.store.view("out.W").shape)
        assert np.max(np.abs(model.logits(b.permuted(full)) - model.logits(b))) < 1e-9


def test_padding_does_not_matter(batch):
    """Extra masked slots (trimmed vs padded to 30) leave the logits unchanged."""
    from helpers import events
    ds = events(10, seed=8)
    for model in (small_model("tensor"), small_model("baseline_pfn", generic=False)):
        a = model.logits(Batch.from_dataset(ds, trim=True))
        b = model.logits(Batch.from_dataset(ds, trim=False))
        assert np.max(np.abs(a - b)) < 1e-9


def test_garbage_in_masked_slots_is_ignored(batch):
    model = small_model("tensor")
    dirty = Batch(batch.jet_p, batch.p.copy(), batch.a.copy(), batch.q.copy(), batch.ptype.copy(), batch.mask,
                  batch.label)
    dirty.p[~batch.mask] = 7.0
    dirty.a[~batch.mask] = -3.0
    dirty.q[~batch.mask] = 1
    assert np.max(np.abs(model.logits(dirty) - model.logits(batch))) < 1e-12


def test_pfn_is_not_rotation_invariant(batch):
    model = small_model("baseline_pfn", generic=False)
    model.store.view("out.W")[...] = np.random.default_rng(0).normal(size=model.store.view("out.W").shape)
    R = rotation_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.pi / 2).m
    assert np.max(np.abs(model.logits(batch.rotated(R)) - model.logits(batch))) > 1e-3


def test_pfn_logits_finite_on_wild_inputs(rng):
    b = batch_of(5, seed=1)
    wild = Batch(rng.uniform(-10, 10, b.jet_p.shape), rng.uniform(-10, 10, b.p.shape), rng.uniform(-10, 10, b.a.shape),
                 b.q, b.ptype, b.mask, b.label)
    assert np.all(np.isfinite(small_model("baseline_pfn", generic=False).logits(wild)))
    assert np.all(np.isfinite(small_model("tensor").logits(wild)))


@pytest.mark.parametrize("flags", LADDER_FLAGS, ids=lambda f: "+".join(str(x) for x in f))
def test_fast_forward_matches_reference(flags, batch):
    model = small_model(*flags)
    fast = btn_forward(Tape(False), model.cfg, model.store, batch).value
    ref = btn_forward_reference(Tape(False), model.cfg, model.store, batch).value
    assert np.max(np.abs(fast - ref)) < 1e-12


def test_untrained_model_scores_all_events_alike(batch):
    for mc in ("baseline_pfn", "vector", "tensor"):
        logits = build_model(ModelConfig(model_class=mc, rep_width=8, latent_dim=8, hidden_width=16)).logits(batch)
        assert np.all(logits == 0.0)


# --- construction and checkpoints -------------------------------------------------------

def test_same_seed_same_parameters():
    a = build_model(ModelConfig(seed=3, rep_width=8, latent_dim=8))
    b = build_model(ModelConfig(seed=3, rep_width=8, latent_dim=8))
    c = build_model(ModelConfig(seed=4, rep_width=8, latent_dim=8))
    assert np.array_equal(a.store.values, b.store.values)
    assert not np.array_equal(a.store.values, c.store.values)


def test_tensor_bilinear_has_more_parameters():
    kw = dict(rep_width=16, latent_dim=16, hidden_width=32)
    vec = build_model(ModelConfig(model_class="vector", enable_bilinear=False, enable_so2=False, **kw))
    ten = build_model(ModelConfig(model_class="tensor", enable_bilinear=True, enable_so2=False, **kw))
    assert ten.n_params > vec.n_params


def test_so2_init_is_near_identity():
    m = build_model(ModelConfig(rep_width=8, latent_dim=8))
    a = m.store.view("phi0.so2v.a")
    assert np.max(np.abs(a - np.eye(8))) < 0.1 and np.max(np.abs(m.store.view("phi0.so2v.phi"))) < 0.1


@pytest.mark.parametrize("bad", [dict(model_class="graph"), dict(rep_width=7), dict(latent_dim=0),
                                 dict(scalar_activation="tanh"), dict(momentum_scale=0.0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_labels():
    assert ModelConfig(model_class="baseline_pfn").label == "baseline"
    assert ModelConfig(model_class="vector", enable_bilinear=True, enable_so2=False).label == "vector+BiL"
    assert ModelConfig().label == "tensor+BiL+SO2"


def test_checkpoint_round_trip(tmp_path):
    model = small_model("tensor", seed=2)
    save_checkpoint(tmp_path / "m.ckpt", model, {"epoch": 3})
    back, meta, adam = load_checkpoint(tmp_path / "m.ckpt")
    assert back.store.values.tobytes() == model.store.values.tobytes()
    assert back.cfg == model.cfg and meta == {"epoch": 3} and adam is None
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(CKPT_MAGIC)
    hlen = int.from_bytes(raw[12:16], "little")
    assert json.loads(raw[16:16 + hlen])["config"]["model_class"] == "tensor"


def test_checkpoint_with_optimizer(tmp_path):
    from btnet.autodiff import AdamState
    model = small_model("vector", seed=1)
    adam = AdamState.for_store(model.store, lr=0.01)
    adam.m += 0.5
    adam.step = 7
    save_checkpoint(tmp_path / "m.ckpt", model, adam=adam)
    _, _, back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.step == 7 and back.lr == 0.01 and np.array_equal(back.m, adam.m)


def test_checkpoint_errors(tmp_path):
    model = small_model("vector")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    bad = bytearray(raw)
    bad[20:30] = b"\xff" * 10
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="corrupted header"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)
    path.write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    bad = bytearray(raw)
    bad[8] = 9
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
