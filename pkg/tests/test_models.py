import numpy as np
import pytest

from errors import ConfigError
from models import ConvNetModel, NetworkSpec


def test_default_spec_layer_shapes():
    spec = NetworkSpec()
    assert spec.padding == "valid"
    shapes = spec.layer_shapes()
    assert [s["conv"] for s in shapes] == [(92, 92, 31), (42, 42, 14), (17, 17, 6), (4, 4, 2)]
    assert [s["pooled"] for s in shapes] == [(46, 46, 15), (21, 21, 7), (8, 8, 3), (2, 2, 1)]
    assert shapes[-1]["pool_factors"] == (2, 2, 2)
    assert spec.flat_features == 2 * 2 * 1 * 100
    assert spec.activations == ("relu",) * 5


def test_default_stack_names_the_layer_that_collapses():
    with pytest.raises(ConfigError, match="Conv layer 3"):
        NetworkSpec(input_dims=(32, 32, 8))
    same = NetworkSpec(input_dims=(32, 32, 8), padding="same")
    assert same.layer_shapes()[-1]["pooled"] == (2, 2, 1)


def test_pooling_never_exceeds_axis_length():
    spec = NetworkSpec(input_dims=(4, 4, 1), channels=2, filters=(3,), kernel=(3, 3, 1), padding="same", fc_units=4)
    assert spec.layer_shapes()[0]["pool_factors"] == (2, 2, 1)
    assert spec.flat_features == 2 * 2 * 1 * 3


def test_valid_padding_shrinks_and_can_fail():
    spec = NetworkSpec(input_dims=(8, 8, 4), channels=1, filters=(2,), kernel=(3, 3, 2), padding="valid", fc_units=2)
    assert spec.layer_shapes()[0]["conv"] == (6, 6, 3)
    with pytest.raises(ConfigError):
        NetworkSpec(input_dims=(2, 2, 2), channels=1, filters=(2,), kernel=(3, 3, 2), padding="valid")


def test_parameter_shapes_and_count():
    spec = NetworkSpec(input_dims=(4, 4, 2), channels=2, filters=(3, 5), kernel=(3, 3, 2), padding="same", fc_units=6)
    shapes = spec.parameter_shapes()
    assert list(shapes) == ["conv1.W", "conv1.b", "conv2.W", "conv2.b", "fc.W", "fc.b", "out.W", "out.b"]
    assert shapes["conv1.W"] == (3, 3, 2, 2, 3)
    assert shapes["conv2.W"] == (3, 3, 2, 3, 5)
    assert shapes["fc.W"] == (spec.flat_features, 6)
    assert spec.parameter_count() == sum(int(np.prod(s)) for s in shapes.values())


@pytest.mark.parametrize("kwargs", [
    {"dropout": 1.0},
    {"padding": "full"},
    {"activations": ("tanh", "relu", "relu", "relu", "relu")},
    {"activations": ("relu",)},
    {"n_classes": 1},
])
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        NetworkSpec(**kwargs)


def test_spec_dict_roundtrip():
    spec = NetworkSpec(input_dims=(8, 8, 2), filters=(4,), fc_units=3, activations=("identity", "relu"))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_is_seeded_and_bounded():
    spec = NetworkSpec(input_dims=(4, 4, 2), channels=2, filters=(3,), kernel=(3, 3, 2), fc_units=5)
    a, b = ConvNetModel(spec, seed=1), ConvNetModel(spec, seed=1)
    c = ConvNetModel(spec, seed=2)
    for name, w in a.get_weights().items():
        np.testing.assert_array_equal(w, b.get_weights()[name])
        assert w.dtype == np.float32
        if name.endswith(".b"):
            assert not w.any()
    limit = np.sqrt(6.0 / (3 * 3 * 2 * 2))
    assert np.abs(a.params["conv1.W"]).max() <= limit + 1e-6
    assert not np.array_equal(a.params["fc.W"], c.params["fc.W"])


def test_set_weights_checks_shapes_and_astype_copies():
    spec = NetworkSpec(input_dims=(4, 4, 2), channels=1, filters=(2,), kernel=(3, 3, 1), fc_units=3)
    model = ConvNetModel(spec)
    weights = {k: np.ones_like(v) for k, v in model.get_weights().items()}
    model.set_weights(weights)
    assert model.params["out.b"].tolist() == [1.0, 1.0]
    weights["fc.W"] = np.ones((2, 2))
    with pytest.raises(ConfigError):
        model.set_weights(weights)
    wide = model.astype(np.float64)
    assert wide.params["out.W"].dtype == np.float64
    wide.params["out.b"][0] = 5.0
    assert model.params["out.b"][0] == 1.0
