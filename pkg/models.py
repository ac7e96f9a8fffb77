import numpy as np
from dataclasses import dataclass
from typing import Dict, List, Tuple

from errors import ConfigError

# the default valid-padded stack shrinks this to (2, 2, 1)
INPUT_DIMS = (96, 96, 32)
INPUT_CHANNELS = 8
CONV_FILTERS = (50, 100, 100, 100)
CONV_KERNEL = (5, 5, 2)
POOL = 2
FC_UNITS = 6000
N_CLASSES = 2
DROPOUT = 0.35
ACTIVATIONS = ("relu", "identity")
PADDINGS = ("valid", "same")


@dataclass(frozen=True)
class NetworkSpec:
    """
    3D ConvNet layout.

    Architecture:
        Input (W, H, D, channels)
          -> [Conv3D(kernel) -> activation -> MaxPool(min(pool, dim)) -> dropout] x len(filters)
          -> Flatten -> Dense(fc_units) -> activation -> dropout
          -> Dense(n_classes) -> softmax
    """
    input_dims: Tuple[int, int, int] = INPUT_DIMS
    channels: int = INPUT_CHANNELS
    filters: Tuple[int, ...] = CONV_FILTERS
    kernel: Tuple[int, int, int] = CONV_KERNEL
    pool: int = POOL
    padding: str = "valid"
    fc_units: int = FC_UNITS
    n_classes: int = N_CLASSES
    dropout: float = DROPOUT
    # one entry per conv layer plus the dense layer
    activations: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if not self.activations:
            object.__setattr__(self, "activations", ("relu",) * (len(self.filters) + 1))
        if len(self.activations) != len(self.filters) + 1:
            raise ConfigError("activations needs one entry per conv layer plus one for the dense layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ConfigError(f"Activations must be among {ACTIVATIONS}, got {self.activations}")
        if self.padding not in PADDINGS:
            raise ConfigError(f"Padding must be one of {PADDINGS}, got '{self.padding}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"Dropout rate must be in [0, 1), got {self.dropout}")
        if self.pool < 1 or self.channels < 1 or self.fc_units < 1 or self.n_classes < 2:
            raise ConfigError("pool, channels and fc_units must be positive and n_classes at least 2")
        self.layer_shapes()

    def layer_shapes(self) -> List[Dict[str, Tuple[int, int, int]]]:
        """Spatial dims after each conv and after its pooling step."""
        dims = self.input_dims
        shapes = []
        for layer in range(len(self.filters)):
            if self.padding == "valid":
                conv = tuple(d - k + 1 for d, k in zip(dims, self.kernel))
            else:
                conv = dims
            if min(conv) < 1:
                raise ConfigError(f"Conv layer {layer + 1} shrinks input dims {dims} below 1 with kernel {self.kernel}")
            factors = tuple(min(self.pool, d) for d in conv)
            pooled = tuple(d // f for d, f in zip(conv, factors))
            shapes.append({"conv": conv, "pool_factors": factors, "pooled": pooled})
            dims = pooled
        return shapes

    @property
    def flat_features(self) -> int:
        last = self.layer_shapes()[-1]["pooled"] if self.filters else self.input_dims
        width = self.filters[-1] if self.filters else self.channels
        return int(np.prod(last)) * width

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        c_in = self.channels
        for layer, c_out in enumerate(self.filters, start=1):
            shapes[f"conv{layer}.W"] = self.kernel + (c_in, c_out)
            shapes[f"conv{layer}.b"] = (c_out,)
            c_in = c_out
        shapes["fc.W"] = (self.flat_features, self.fc_units)
        shapes["fc.b"] = (self.fc_units,)
        shapes["out.W"] = (self.fc_units, self.n_classes)
        shapes["out.b"] = (self.n_classes,)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims), "channels": self.channels, "filters": list(self.filters),
            "kernel": list(self.kernel), "pool": self.pool, "padding": self.padding,
            "fc_units": self.fc_units, "n_classes": self.n_classes, "dropout": self.dropout,
            "activations": list(self.activations),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        return cls(input_dims=tuple(doc["input_dims"]), channels=doc["channels"], filters=tuple(doc["filters"]),
                   kernel=tuple(doc["kernel"]), pool=doc["pool"], padding=doc["padding"],
                   fc_units=doc["fc_units"], n_classes=doc["n_classes"], dropout=doc["dropout"],
                   activations=tuple(doc["activations"]))


class ConvNetModel:
    """
    Parameters of a NetworkSpec, initialized deterministically.

    Weights are uniform in +-sqrt(6 / fan_in) (fan_in = kernel volume x
    input channels for conv layers, input width for dense layers);
    biases start at 0.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 42, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.rng = np.random.RandomState(seed)

        self.params: Dict[str, np.ndarray] = {}
        for name, shape in spec.parameter_shapes().items():
            if name.endswith(".b"):
                self.params[name] = np.zeros(shape, dtype=self.dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                self.params[name] = self.rng.uniform(-limit, limit, size=shape).astype(self.dtype)

    @property
    def n_conv(self) -> int:
        return len(self.spec.filters)

    def get_weights(self) -> Dict[str, np.ndarray]:
        """Parameter arrays by name, in layer order."""
        return self.params

    def set_weights(self, weights: Dict[str, np.ndarray]) -> None:
        for name, shape in self.spec.parameter_shapes().items():
            arr = np.asarray(weights[name])
            if arr.shape != shape:
                raise ConfigError(f"Parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ConvNetModel":
        clone = ConvNetModel.__new__(ConvNetModel)
        clone.spec = self.spec
        clone.dtype = np.dtype(dtype)
        clone.rng = self.rng
        clone.params = {k: v.astype(dtype, copy=True) for k, v in self.params.items()}
        return clone
