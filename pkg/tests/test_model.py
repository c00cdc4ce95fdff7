import numpy as np
import pytest

from ffino import tensor as T
from ffino import datagen as D
from ffino import model as M


def tiny_config(**kw):
    base = dict(width=6, modes_r=4, modes_z=3, projection_width=12,
                branch_hidden=(8, 8), grid_nr=16, grid_nz=8, unet_depth=1)
    base.update(kw)
    return M.ModelConfig(**base)


def rand_inputs(cfg, bs, bt, seed=0, precision="single"):
    rng = np.random.default_rng(seed)
    spatial = T.Tensor(rng.random((bs, cfg.spatial_in_channels, cfg.grid_nr, cfg.grid_nz)),
                       precision=precision)
    scalars = T.Tensor(rng.random((bs, cfg.scalar_in_dim)), precision=precision)
    times = T.Tensor(rng.random((bt, 1)), precision=precision)
    return spatial, scalars, times


def test_encode_output_shape():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=1)
    spatial, scalars, times = rand_inputs(cfg, 4, 3)
    with T.no_grad():
        z = model.encode(spatial, scalars, times)
    assert z.shape == (12, cfg.width, 16, 8)


def test_encode_zero_scalar_branch():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=2)
    for w, b in zip(model.branch2.weights, model.branch2.biases):
        w.data[...] = 0
        b.data[...] = 0
    spatial, scalars, times = rand_inputs(cfg, 2, 2)
    with T.no_grad():
        z = model.encode(spatial, scalars, times)
        b1 = model.branch1(spatial)
        t = model.trunk(times)
    bs, bt = 2, 2
    want = (b1.data[:, None] * t.data[None, :, :, None, None]).reshape(z.shape)
    assert np.allclose(z.data, want, atol=1e-6)


def test_encode_unit_trunk():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=3)
    for w, b in zip(model.trunk.weights, model.trunk.biases):
        w.data[...] = 0
        b.data[...] = 0
    model.trunk.biases[-1].data[...] = 1.0
    spatial, scalars, times = rand_inputs(cfg, 2, 2)
    with T.no_grad():
        z = model.encode(spatial, scalars, times)
        b1 = model.branch1(spatial)
        b2 = model.branch2(scalars)
    want = (b1.data + b2.data[:, :, None, None])[:, None].repeat(2, axis=1).reshape(z.shape)
    assert np.allclose(z.data, want, atol=1e-6)


def test_encode_time_ratio_structure():
    # time enters only multiplicatively through the trunk
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=4)
    spatial, scalars, _ = rand_inputs(cfg, 1, 1)
    t1 = T.Tensor([[0.3]], precision="single")
    t2 = T.Tensor([[0.9]], precision="single")
    with T.no_grad():
        z1 = model.encode(spatial, scalars, t1).data
        z2 = model.encode(spatial, scalars, t2).data
        tr1 = model.trunk(t1).data[0]
        tr2 = model.trunk(t2).data[0]
    mask = np.abs(tr2) > 1e-6
    ratio_field = z1[:, mask] / z2[:, mask]
    want = np.broadcast_to((tr1[mask] / tr2[mask])[None, :, None, None],
                           ratio_field.shape)
    denom_ok = np.abs(z2[:, mask]) > 1e-4
    assert np.allclose(ratio_field[denom_ok], want[denom_ok], rtol=1e-3)


def test_encode_scalar_branch_grid_constant():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=5)
    spatial, scalars, times = rand_inputs(cfg, 1, 1)
    scalars2 = T.Tensor(scalars.data + 0.1, precision="single")
    with T.no_grad():
        b2a = model.branch2(scalars).data
        b2b = model.branch2(scalars2).data
    assert b2a.shape == (1, cfg.width)    # grid-constant before the merger
    assert not np.allclose(b2a, b2b)


def test_encode_wrong_channels():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=6)
    bad = T.Tensor(np.zeros((2, 3, 16, 8)), precision="single")
    _, scalars, times = rand_inputs(cfg, 2, 1)
    with pytest.raises(T.ShapeError):
        model.encode(bad, scalars, times)


def test_decode_zero_params_constant_bias():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=7)
    for name, p in model.named_parameters():
        if not name.startswith(("branch", "trunk")):
            p.data[...] = 0
    model.proj3.bias.data[...] = 0.37
    z = T.Tensor(np.random.default_rng(0).random((2, cfg.width, 16, 8)), precision="single")
    with T.no_grad():
        out = model.decode(z)
    assert np.allclose(out.data, 0.37, atol=1e-6)


def test_forward_shapes():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=8)
    with T.no_grad():
        s, c, t = rand_inputs(cfg, 4, 4)
        assert model(s, c, t).shape == (4, 4, 16, 8)
        s, c, t = rand_inputs(cfg, 1, 12)
        assert model(s, c, t).shape == (1, 12, 16, 8)


def test_forward_permutation_equivariance():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=9)
    s, c, t = rand_inputs(cfg, 4, 2, seed=3)
    with T.no_grad():
        out = model(s, c, t).data
    perm = np.array([2, 0, 3, 1])
    s2 = T.Tensor(s.data[perm], precision="single")
    c2 = T.Tensor(c.data[perm], precision="single")
    with T.no_grad():
        out2 = model(s2, c2, t).data
    assert np.allclose(out2, out[perm], atol=1e-6)


def test_gradient_reaches_every_parameter_group():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=10)
    s, c, t = rand_inputs(cfg, 2, 2, seed=4)
    out = model(s, c, t)
    T.tsum(T.mul(out, out)).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, f"{name} got no gradient"
        assert np.any(p.grad != 0), f"{name} gradient is identically zero"


def test_shape_trace_stages():
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=11)
    s, c, t = rand_inputs(cfg, 2, 3)
    trace = []
    with T.no_grad():
        model(s, c, t, trace=trace)
    names = [n for n, _ in trace]
    assert names[:5] == ["branch1", "branch2", "trunk", "branch_merger",
                         "branch_trunk_merger"]
    assert names[-1] == "output"
    shapes = dict(trace)
    assert shapes["branch_trunk_merger"] == (6, cfg.width, 16, 8)
    assert shapes["output"] == (2, 3, 16, 8)


def test_param_count_single_linear_216():
    rng = np.random.default_rng(0)
    from ffino import layers as L
    fnn = L.Fnn([5, 36], rng)
    count = sum(p.size for _, p in fnn.named_params("x"))
    assert count == 5 * 36 + 36 == 216


def test_param_count_analytic_matches_enumeration():
    rng = np.random.default_rng(12)
    for _ in range(4):
        cfg = M.ModelConfig(
            width=int(rng.integers(4, 12)),
            modes_r=int(rng.integers(2, 5)),
            modes_z=int(rng.integers(2, 4)),
            n_f_fourier=int(rng.integers(1, 3)),
            m_u_fourier=int(rng.integers(1, 3)),
            projection_width=int(rng.integers(8, 32)),
            branch_hidden=(int(rng.integers(4, 16)),),
            grid_nr=16, grid_nz=8,
            unet_depth=int(rng.integers(0, 3)),
        )
        model = M.FfinoModel(cfg, seed=0)
        assert model.param_count() == M.analytic_param_count(cfg)


def test_ffino_preset_fewer_params_than_fmionet_like():
    a = tiny_config(decoder_preset="ffino")
    b = tiny_config(decoder_preset="fmionet_like")
    assert M.analytic_param_count(a) < M.analytic_param_count(b)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(width=0)
    with pytest.raises(ValueError):
        M.ModelConfig(decoder_preset="bogus")
    with pytest.raises(ValueError):
        M.ModelConfig(decoder_preset="custom", custom_decoder=())
    with pytest.raises(ValueError):
        M.ModelConfig(decoder_preset="custom", custom_decoder=("f", "x"))


def test_model_init_deterministic():
    cfg = tiny_config()
    m1 = M.FfinoModel(cfg, seed=33)
    m2 = M.FfinoModel(cfg, seed=33)
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)


# ---------------------------------------------------------------------------
# featurization

def test_spatial_features_channels():
    grid = D.make_grid(16, 8)
    s = D.sample_from_seed(0, 0, grid)
    feats = M.spatial_features(s, grid)
    assert feats.shape == (5, 16, 8)
    assert feats[0].min() >= 0 and feats[0].max() <= 1      # log-kh normalized
    assert feats[2].min() >= -0.05 and feats[2].max() <= 1.05
    assert feats[3, 0, 0] == 0 and feats[3, -1, 0] == 1     # r coordinate
    assert feats[4, 0, 0] == 0 and feats[4, 0, -1] == 1     # z coordinate


def test_scalar_features_normalized():
    grid = D.make_grid(16, 8)
    s = D.sample_from_seed(1, 0, grid)
    f = M.scalar_features(s)
    assert f.shape == (7,)
    assert np.all(f >= 0) and np.all(f <= 1)


def test_time_features():
    grid = D.make_grid(16, 8)
    t = M.time_features(grid)
    assert t.shape == (12, 1)
    assert t[0, 0] == 1.0 / 180.0 and t[-1, 0] == 1.0
    sub = M.time_features(grid, indices=[0, 11])
    assert sub.shape == (2, 1) and sub[1, 0] == 1.0


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=20)
    p = tmp_path / "m.fck"
    M.save_checkpoint(model, p)
    back = M.load_checkpoint(p)
    assert back.param_count() == model.param_count()
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    s, c, t = rand_inputs(cfg, 2, 2, seed=5)
    with T.no_grad():
        out1 = model(s, c, t).data
        out2 = back(s, c, t).data
    assert np.array_equal(out1, out2)
    # save(load(file)) reproduces the file byte for byte
    p2_file = tmp_path / "m2.fck"
    M.save_checkpoint(back, p2_file)
    assert p.read_bytes() == p2_file.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.fck"
    p.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(D.DataFormatError):
        M.load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=21)
    p = tmp_path / "t.fck"
    M.save_checkpoint(model, p)
    raw = p.read_bytes()
    (tmp_path / "t2.fck").write_bytes(raw[:len(raw) - 100])
    with pytest.raises(D.DataFormatError):
        M.load_checkpoint(tmp_path / "t2.fck")


def test_checkpoint_rejects_double_precision(tmp_path):
    cfg = tiny_config()
    model = M.FfinoModel(cfg, seed=22, precision="double")
    with pytest.raises(ValueError):
        M.save_checkpoint(model, tmp_path / "d.fck")
