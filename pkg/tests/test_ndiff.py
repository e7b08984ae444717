import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ttlvc.ndiff import (
    Activation,
    Dense,
    Dropout,
    FormatError,
    LayerConfig,
    MismatchError,
    Network,
    ParameterStore,
    ShapeError,
    TensorSpec,
    VersionError,
    forward,
    gradient_check,
    load_features,
    load_params,
    reset_module,
    save_features,
    save_params,
    seeded_init,
    set_dropout,
)


def _cfg_strategy():
    dims = st.integers(1, 6)
    return st.one_of(
        st.builds(LayerConfig, st.just("conv1d"), dims, dims, kernel=st.sampled_from([1, 3, 5, 7])),
        st.builds(LayerConfig, st.just("batchnorm"), dims),
        st.builds(LayerConfig, st.just("activation"), activation=st.sampled_from(["gelu", "tanh", "sigmoid", "identity"])),
        st.builds(LayerConfig, st.just("recurrent-uni"), dims, dims),
        st.builds(LayerConfig, st.just("recurrent-bi"), dims, dims),
        st.builds(LayerConfig, st.just("fully-connected"), dims, dims),
        st.builds(LayerConfig, st.just("dropout"), p=st.floats(0, 0.9)),
    )


@settings(max_examples=120, deadline=None)
@given(cfg=_cfg_strategy(), batch=st.integers(1, 3), length=st.integers(1, 9), seed=st.integers(0, 100))
def test_shape_laws(cfg, batch, length, seed):
    net = reset_module(Network([cfg]), seed)
    c_in = cfg.in_dim if cfg.in_dim else 3
    x = torch.randn(batch, length, c_in)
    y = net(x)
    out = cfg.output_dim or c_in
    assert tuple(y.shape) == (batch, length, out)
    assert torch.isfinite(y).all()


def test_embedding_shape():
    net = reset_module(Network([LayerConfig("embedding", 27, 5)]), 0)
    assert tuple(net(torch.tensor([[0, 26, 3]])).shape) == (1, 3, 5)


def test_identity_activation():
    x = torch.randn(2, 4, 3)
    assert torch.equal(Activation("identity")(x), x)


def test_conv1d_same_padding_example():
    y = forward([LayerConfig("conv1d", 2, 4, kernel=5)], seeded_init([LayerConfig("conv1d", 2, 4, kernel=5)], 0), torch.randn(1, 7, 2))
    assert tuple(y.shape) == (1, 7, 4)


def test_bi_recurrent_example():
    cfgs = [LayerConfig("recurrent-bi", 2, 3)]
    y = forward(cfgs, seeded_init(cfgs, 1), torch.randn(1, 5, 2))
    assert tuple(y.shape) == (1, 5, 6)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        LayerConfig("conv1d", 2, 2, kernel=4)


def test_shape_error_names_layer():
    net = Network([LayerConfig("fully-connected", 3, 4), LayerConfig("fully-connected", 5, 2)])
    with pytest.raises(ShapeError) as e:
        net(torch.randn(1, 2, 3))
    assert "layers.1" in str(e.value)


def test_tensorspec_invariants():
    TensorSpec((2, 3))
    with pytest.raises(ValueError):
        TensorSpec(())
    with pytest.raises(ValueError):
        TensorSpec((2, 0))
    with pytest.raises(ValueError):
        TensorSpec((2,), "int8")


# --- gradient checks -----------------------------------------------------------------


def test_gradcheck_dense_squared_error():
    torch.manual_seed(0)
    net = reset_module(Dense(4, 3), 0).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    t = torch.randn(5, 3, dtype=torch.float64)
    rep = gradient_check(net, lambda y: ((y - t) ** 2).sum(), x)
    assert rep.passed and rep.max_error < 1e-6


def test_gradcheck_frozen_network_is_empty_pass():
    net = Network([LayerConfig("activation", activation="tanh")]).double()
    rep = gradient_check(net, lambda y: y.sum(), torch.zeros(1, 2, 3, dtype=torch.float64))
    assert rep.passed and rep.errors == {}


def test_gradcheck_gelu_at_zero():
    net = Network([LayerConfig("activation", activation="gelu")]).double()
    rep = gradient_check(net, lambda y: (y**2).sum() + y.sum(), torch.zeros(1, 2, 3, dtype=torch.float64), check_inputs=True)
    assert rep.passed and rep.max_error < 1e-6


def test_gradcheck_rejects_float32_and_bad_eps():
    net = reset_module(Dense(2, 2), 0)
    with pytest.raises(TypeError):
        gradient_check(net, lambda y: y.sum(), torch.randn(1, 2))
    with pytest.raises(ValueError):
        gradient_check(net.double(), lambda y: y.sum(), torch.randn(1, 2, dtype=torch.float64), eps=1e-2)


def test_gradcheck_reports_non_finite_gradient():
    net = reset_module(Dense(2, 1), 0).double()
    rep = gradient_check(net, lambda y: torch.sqrt(y * 0.0).sum(), torch.ones(1, 2, dtype=torch.float64))
    assert not rep.passed
    assert any("weight" in f for f in rep.failures)


def test_gradcheck_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    net = reset_module(Dense(3, 3), 0).double()
    rep = gradient_check(net, lambda y: Wrong.apply(y).sum(), torch.randn(2, 3, dtype=torch.float64))
    assert not rep.passed


# --- init and stores -----------------------------------------------------------------

CFGS = [LayerConfig("conv1d", 3, 4, kernel=3), LayerConfig("batchnorm", 4), LayerConfig("recurrent-bi", 4, 2), LayerConfig("fully-connected", 4, 2)]


def test_seeded_init_determinism():
    assert seeded_init(CFGS, 5) == seeded_init(CFGS, 5)
    assert seeded_init(CFGS, 5) != seeded_init(CFGS, 6)
    assert len(seeded_init([], 0)) == 0


def test_seeded_init_rejects_negative_seed():
    with pytest.raises(ValueError):
        seeded_init(CFGS, -1)


def test_save_load_round_trip(tmp_path):
    store = seeded_init(CFGS, 3)
    store.entries["extra64"] = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    save_params(store, tmp_path / "a.ttlv")
    back = load_params(tmp_path / "a.ttlv")
    assert back == store
    assert back["extra64"].dtype == np.float64


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.text("abc.", min_size=1, max_size=6), st.lists(st.integers(1, 3), min_size=0, max_size=3)), max_size=5, unique_by=lambda t: t[0]), st.integers(0, 99))
def test_round_trip_property(tmp_path_factory, entries, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore({n: rng.standard_normal(shape).astype(np.float32) for n, shape in entries})
    path = tmp_path_factory.mktemp("rt") / "s.ttlv"
    save_params(store, path)
    assert load_params(path) == store


def test_corrupted_magic(tmp_path):
    save_params(seeded_init(CFGS, 0), tmp_path / "a.ttlv")
    data = bytearray((tmp_path / "a.ttlv").read_bytes())
    data[:4] = b"XXXX"
    (tmp_path / "a.ttlv").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_params(tmp_path / "a.ttlv")


def test_truncated_and_version(tmp_path):
    save_params(seeded_init(CFGS, 0), tmp_path / "a.ttlv")
    data = (tmp_path / "a.ttlv").read_bytes()
    (tmp_path / "t.ttlv").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_params(tmp_path / "t.ttlv")
    (tmp_path / "v.ttlv").write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(VersionError):
        load_params(tmp_path / "v.ttlv")


def test_header_layout(tmp_path):
    store = ParameterStore({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    save_params(store, tmp_path / "a.ttlv")
    data = (tmp_path / "a.ttlv").read_bytes()
    assert data[:4] == b"TTLV"
    assert struct.unpack("<II", data[4:12]) == (1, 1)
    assert struct.unpack("<H", data[12:14]) == (1,)
    assert data[14:15] == b"w"
    assert data[15] == 2 and struct.unpack("<II", data[16:24]) == (1, 2)
    assert data[24] == 0
    assert np.frombuffer(data[25:], "<f4").tolist() == [1.0, 2.0]


def test_missing_entry_names_it():
    net = Network(CFGS)
    store = ParameterStore.from_module(reset_module(Network(CFGS), 0))
    name = store.names()[0]
    del store.entries[name]
    before = [p.detach().clone() for p in net.parameters()]
    with pytest.raises(MismatchError) as e:
        store.load_into(net)
    assert name in str(e.value)
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_shape_mismatch_fails_before_forward():
    store = seeded_init([LayerConfig("fully-connected", 3, 4)], 0)
    with pytest.raises(MismatchError):
        store.load_into(Network([LayerConfig("fully-connected", 3, 5)]))


def test_feature_roles(tmp_path):
    save_features(tmp_path / "x.mel", "MEL", mel=np.zeros((3, 2), np.float32))
    assert load_features(tmp_path / "x.mel", "MEL")["mel"].shape == (3, 2)
    with pytest.raises(FormatError):
        load_features(tmp_path / "x.mel", "CTX")


# --- determinism -----------------------------------------------------------------------


def test_forward_pure_without_dropout():
    net = reset_module(Network(CFGS + [LayerConfig("dropout", p=0.5)]), 0)
    net.train()
    set_dropout(net, False)
    x = torch.randn(2, 5, 3)
    assert torch.equal(net(x), net(x))


def test_dropout_seeded_and_always_on():
    d = Dropout(0.5, always_on=True)
    d.eval()
    x = torch.ones(100)
    set_dropout(d, True, seed=4)
    a = d(x)
    set_dropout(d, True, seed=4)
    assert torch.equal(a, d(x))
    assert (a == 0).any()
    off = Dropout(0.5)
    off.eval()
    assert torch.equal(off(x), x)
