import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcycle.gradcheck import network_checks
from voxcycle.networks import (
    LayerSpec,
    NetworkSpec,
    UnsupportedArchitectureError,
    build_discriminator,
    build_generator,
    expected_shapes,
    init_weights,
    layer_table,
    memory_estimate,
    parameter_count,
    patch_report,
    receptive_field,
    shape_trace,
)
from voxcycle.tensor import ConfigurationError, ShapeError


def _rows(spec):
    return [(l.kind, l.filters, l.kernel, l.stride, l.activation) for l in spec.layers]


# ---------------------------------------------------------------- presets

def test_generator_rows():
    expected = ([("conv", 32, 7, 1, "relu"), ("conv", 64, 3, 2, "relu"),
                 ("conv", 128, 3, 2, "relu")]
                + [("residual_block", 128, 3, 1, "none")] * 6
                + [("conv_transpose", 64, 3, 2, "relu"), ("conv_transpose", 32, 3, 2, "relu"),
                   ("conv", 1, 7, 1, "tanh")])
    spec = build_generator()
    assert _rows(spec) == expected
    assert len(spec.layers) == 12
    assert sum(l.kind == "residual_block" for l in spec.layers) == 6


def test_discriminator_rows():
    spec = build_discriminator()
    assert [l.filters for l in spec.layers] == [64, 128, 256, 512, 1]
    assert [l.stride for l in spec.layers] == [2, 2, 1, 1, 1]
    assert {l.kernel for l in spec.layers} == {4}
    assert [l.activation for l in spec.layers] == ["leaky_relu"] * 4 + ["sigmoid"]


def test_layer_table_text():
    lines = layer_table(build_discriminator()).splitlines()
    assert lines[0] == "# discriminator"
    assert lines[2].split("\t") == ["1", "conv", "64", "4", "2", "leaky_relu(0.2)"]
    assert lines[-1].split("\t") == ["5", "conv", "1", "4", "1", "sigmoid"]
    g = layer_table(build_generator()).splitlines()
    assert len(g) == 2 + 12
    assert g[-1].split("\t")[1:] == ["conv", "1", "7", "1", "tanh"]


def test_width_divisor_must_divide():
    with pytest.raises(ConfigurationError):
        build_generator(width_divisor=5)
    assert [l.filters for l in build_discriminator(8).layers] == [8, 16, 32, 64, 1]


def test_residual_channel_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        NetworkSpec("custom", (LayerSpec("residual_block", 8, 3, 1, "none", True, 1),), 4)


# -------------------------------------------------------- parameter count

def test_parameter_count_examples():
    g = build_generator()
    first = NetworkSpec("custom", g.layers[:1])
    assert parameter_count(first) == 11008 + 64  # 7^3*1*32 + 32 plus gamma and beta
    plain = NetworkSpec("custom", (LayerSpec("conv", 32, 7, 1, "relu", False),))
    assert parameter_count(plain) == 11008
    d1 = NetworkSpec("custom", build_discriminator().layers[:1])
    assert parameter_count(d1) == 4160
    assert parameter_count(NetworkSpec("custom", ())) == 0


@pytest.mark.parametrize("spec", [build_generator(), build_discriminator(),
                                  build_generator(8), build_discriminator(4)])
def test_parameter_count_matches_network(spec):
    net = init_weights(spec)
    assert net.parameter_count() == parameter_count(spec)
    assert {k: v.shape for k, v in net.params.items()} == expected_shapes(spec)


# ---------------------------------------------------------- receptive field

def test_receptive_field_examples():
    assert receptive_field([(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]) == 70
    assert receptive_field([(4, 2)]) == 4
    assert receptive_field(build_discriminator()) == 46


def test_patch_report_flags_discrepancy():
    report = patch_report()
    assert report.recurrence == 46 and report.stated == 51
    assert not report.consistent
    assert "46" in str(report) and "51" in str(report)


def test_receptive_field_rejects_generator():
    with pytest.raises(UnsupportedArchitectureError):
        receptive_field(build_generator())


@given(st.lists(st.tuples(st.integers(1, 7), st.integers(1, 3)), min_size=1, max_size=6),
       st.integers(0, 5), st.sampled_from(["kernel", "stride"]))
def test_receptive_field_monotone(pairs, which, field):
    idx = which % len(pairs)
    k, s = pairs[idx]
    bigger = list(pairs)
    bigger[idx] = (k + 1, s) if field == "kernel" else (k, s + 1)
    assert receptive_field(bigger) >= receptive_field(pairs)


# ------------------------------------------------------------------ shapes

def test_generator_shape_trace_working_grid():
    trace = shape_trace(build_generator(), (152, 180, 120))
    assert trace[-1] == (1, 152, 180, 120)
    assert trace[2] == (128, 38, 45, 30)


def test_discriminator_shape_trace_working_grid():
    trace = shape_trace(build_discriminator(), (152, 180, 120))
    # composed per-layer formula: floor((n + 2 - 4) / s) + 1
    dims = (152, 180, 120)
    for s in (2, 2, 1, 1, 1):
        dims = tuple((n + 2 - 4) // s + 1 for n in dims)
    assert trace[-1] == (1,) + dims
    assert trace[1][1:] == (38, 45, 30)
    assert [t[1:] for t in trace[2:]] == [(37, 44, 29), (36, 43, 28), (35, 42, 27)]


def test_memory_estimate_grows_with_training():
    spec = build_generator()
    assert memory_estimate(spec, (32, 32, 32), training=True) > memory_estimate(spec, (32, 32, 32))


@settings(max_examples=12, deadline=None)
@given(st.tuples(*[st.sampled_from([8, 12, 16, 20, 24, 28, 32])] * 3), st.integers(0, 100))
def test_generator_preserves_shape(dims, seed):
    net = init_weights(build_generator(16), seed)
    x = np.random.default_rng(seed).uniform(-1, 1, (1,) + dims).astype(np.float32)
    y = net.forward(x)
    assert y.shape == x.shape
    assert np.all(np.abs(y) < 1)


@pytest.mark.parametrize("shape,axis", [((1, 10, 8, 8), "depth"), ((1, 8, 8, 14), "width"),
                                        ((1, 8, 4, 8), "height")])
def test_generator_rejects_bad_dims(shape, axis):
    net = init_weights(build_generator(16))
    with pytest.raises(ConfigurationError, match=axis):
        net.forward(np.zeros(shape, np.float32))


def test_wrong_channel_count():
    net = init_weights(build_discriminator(16))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 16, 16, 16), np.float32))


def test_generator_zero_input_constant_interior():
    net = init_weights(build_generator(4), seed=3)
    y = net.forward(np.zeros((1, 24, 24, 24), np.float32))
    interior = y[:, 6:-6, 6:-6, 6:-6]
    assert np.ptp(interior) == 0.0


@pytest.mark.slow
def test_discriminator_zero_input_scores_in_unit_interval():
    net = init_weights(build_discriminator(), seed=0)
    y = net.forward(np.zeros((1, 64, 64, 64), np.float32))
    assert y.shape == (1, 13, 13, 13)
    assert np.all(np.isfinite(y)) and np.all((y > 0) & (y < 1))


def test_discriminator_scores_random_input():
    net = init_weights(build_discriminator(8), seed=0)
    y = net.forward(np.random.default_rng(0).uniform(-1, 1, (1, 24, 24, 24)).astype(np.float32))
    assert np.all((y > 0) & (y < 1))


# ------------------------------------------------------------------ init

def test_init_deterministic():
    a = init_weights(build_discriminator(8), seed=11)
    b = init_weights(build_discriminator(8), seed=11)
    c = init_weights(build_discriminator(8), seed=12)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["layer01.kernel"], c.params["layer01.kernel"])


def test_init_statistics():
    spec = NetworkSpec("custom", (LayerSpec("conv", 100, 10, 1, "relu", True),), 1)
    net = init_weights(spec, seed=0)
    k = net.params["layer01.kernel"].astype(np.float64)
    assert k.size == 10 ** 5
    assert abs(k.mean()) < 0.001
    assert abs(k.std() - 0.02) < 0.001
    assert np.all(net.params["layer01.bias"] == 0)
    assert np.all(net.params["layer01.gamma"] == 1)
    assert np.all(net.params["layer01.beta"] == 0)


def test_backward_requires_cached_forward():
    net = init_weights(build_discriminator(16))
    net.forward(np.zeros((1, 16, 16, 16), np.float32))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2, 2, 2), np.float32))


# -------------------------------------------------------------- gradients

def test_network_gradients_match_finite_differences():
    for name, err in network_checks(seed=0).items():
        assert err < 1e-4, (name, err)
