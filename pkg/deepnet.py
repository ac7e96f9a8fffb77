"""
Forward and backward passes, loss, RMSprop training and persistence for
the 3D ConvNet defined in models.py.

Tensors are laid out (batch, x, y, z, channels). Convolution is
cross-correlation accumulated one kernel offset at a time, so the
backward pass mirrors the forward loop exactly.
"""
import csv
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, EmptyInputError, PrognosisError, SingleClassError, TrainingDivergedError
from models import ConvNetModel, NetworkSpec
from volume import ANATOMIES, StudyRecord

logger = logging.getLogger(__name__)

NET_FORMAT = "prognosis-convnet"
NET_VERSION = 1
PROB_CLAMP = 1e-7
HU_SCALE = 1000.0

LOG_FIELDS = ("epoch", "lr", "mean_loss", "train_accuracy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    lr_initial: float = 5e-4
    lr_final: float = 1e-5
    lr_hold_until: int = 10
    lr_decay_until: int = 60
    rho: float = 0.9
    eps: float = 1e-6
    batch_size: int = 8
    seed: int = 0
    dropout: Optional[float] = None  # overrides the network's rate when set
    stop_at_accuracy: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ConfigError("Learning rates must satisfy 0 < lr_final <= lr_initial")
        if not 0 <= self.lr_hold_until <= self.lr_decay_until:
            raise ConfigError("lr_hold_until must not exceed lr_decay_until")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"RMSprop rho must be in [0, 1), got {self.rho}")


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Constant through lr_hold_until, log-linear down to lr_final at lr_decay_until, constant after."""
    if epoch <= cfg.lr_hold_until:
        return cfg.lr_initial
    if epoch >= cfg.lr_decay_until:
        return cfg.lr_final
    frac = (epoch - cfg.lr_hold_until) / (cfg.lr_decay_until - cfg.lr_hold_until)
    return math.exp(math.log(cfg.lr_initial) + frac * (math.log(cfg.lr_final) - math.log(cfg.lr_initial)))


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------

def block_downsample(arr: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    """Integer block averaging over the three spatial axes; trailing remainders are cropped."""
    fx, fy, fz = (int(f) for f in factors)
    if min(fx, fy, fz) < 1:
        raise ConfigError(f"Downsampling factors must be positive, got {factors}")
    X, Y, Z = (arr.shape[0] // fx, arr.shape[1] // fy, arr.shape[2] // fz)
    if min(X, Y, Z) < 1:
        raise ConfigError(f"Downsampling {arr.shape[:3]} by {factors} leaves an empty grid")
    cropped = arr[:X * fx, :Y * fy, :Z * fz]
    return cropped.reshape(X, fx, Y, fy, Z, fz, *arr.shape[3:]).mean(axis=(1, 3, 5))


def prepare_input(study: StudyRecord, downsample: Sequence[int] = (1, 1, 1)) -> np.ndarray:
    """Channel 0 is HU / 1000; channels 1-7 are the anatomy masks as 0/1, in ANATOMIES order."""
    channels = [study.volume.data.astype(np.float64) / HU_SCALE]
    channels += [study.masks[a].bits.astype(np.float64) for a in ANATOMIES]
    return block_downsample(np.stack(channels, axis=-1), downsample)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _pad_widths(kernel: Sequence[int], padding: str):
    if padding == "valid":
        return [(0, 0)] * 3
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def conv3d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, padding: str = "valid"):
    """out[n, p, o] = b[o] + sum_{offset, c} xpad[n, p + offset, c] W[offset, c, o]."""
    kx, ky, kz = W.shape[:3]
    pads = _pad_widths((kx, ky, kz), padding)
    xp = np.pad(x, [(0, 0)] + pads + [(0, 0)])
    X, Y, Z = (xp.shape[1] - kx + 1, xp.shape[2] - ky + 1, xp.shape[3] - kz + 1)
    out = np.zeros((x.shape[0], X, Y, Z, W.shape[4]), dtype=x.dtype)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                out += xp[:, i:i + X, j:j + Y, k:k + Z, :] @ W[i, j, k]
    out += b
    return out, xp


def conv3d_backward(dout: np.ndarray, xp: np.ndarray, W: np.ndarray, x_shape, padding: str = "valid"):
    kx, ky, kz = W.shape[:3]
    X, Y, Z, O = dout.shape[1:]
    C = W.shape[3]
    dW = np.zeros_like(W)
    dxp = np.zeros_like(xp)
    flat_dout = dout.reshape(-1, O)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                window = xp[:, i:i + X, j:j + Y, k:k + Z, :]
                dW[i, j, k] = window.reshape(-1, C).T @ flat_dout
                dxp[:, i:i + X, j:j + Y, k:k + Z, :] += dout @ W[i, j, k].T
    db = flat_dout.sum(axis=0)
    (lx, _), (ly, _), (lz, _) = _pad_widths((kx, ky, kz), padding)
    dx = dxp[:, lx:lx + x_shape[1], ly:ly + x_shape[2], lz:lz + x_shape[3], :]
    return dx, dW, db


def maxpool_forward(x: np.ndarray, factors: Sequence[int]):
    """Non-overlapping max pooling; ties go to the first position in the block."""
    px, py, pz = factors
    N, X, Y, Z, C = x.shape
    Xo, Yo, Zo = X // px, Y // py, Z // pz
    blocks = x[:, :Xo * px, :Yo * py, :Zo * pz, :].reshape(N, Xo, px, Yo, py, Zo, pz, C)
    blocks = blocks.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(N, Xo, Yo, Zo, C, px * py * pz)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, factors: Sequence[int], x_shape) -> np.ndarray:
    px, py, pz = factors
    N, Xo, Yo, Zo, C = dout.shape
    blocks = np.zeros((N, Xo, Yo, Zo, C, px * py * pz), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(N, Xo, Yo, Zo, C, px, py, pz).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :Xo * px, :Yo * py, :Zo * pz, :] = blocks.reshape(N, Xo * px, Yo * py, Zo * pz, C)
    return dx


def _activate(z: np.ndarray, kind: str):
    if kind == "relu":
        mask = z > 0
        return z * mask, mask
    return z, None


def _dropout(a: np.ndarray, rate: float, rng: Optional[np.random.Generator]):
    if rate <= 0 or rng is None:
        return a, None
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return a * keep, keep


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Network passes
# ---------------------------------------------------------------------------

def forward(model: ConvNetModel, x: np.ndarray, train: bool = False,
            rng: Optional[np.random.Generator] = None, dropout: Optional[float] = None):
    """
    Class probabilities (batch, n_classes) and the cache needed by
    backward(). Dropout is applied only when train is set and an rng is given.
    """
    spec = model.spec
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 4:
        x = x[None]
    if x.shape[1:] != spec.input_dims + (spec.channels,):
        raise PrognosisError(f"Network expects input {spec.input_dims + (spec.channels,)}, got {x.shape[1:]}")
    rate = spec.dropout if dropout is None else dropout
    drop_rng = rng if train else None
    p = model.params
    cache = {"layers": [], "input_shape": x.shape}

    a = x
    for layer, shapes in enumerate(spec.layer_shapes(), start=1):
        z, xp = conv3d_forward(a, p[f"conv{layer}.W"], p[f"conv{layer}.b"], spec.padding)
        h, relu = _activate(z, spec.activations[layer - 1])
        pooled, arg = maxpool_forward(h, shapes["pool_factors"])
        out, keep = _dropout(pooled, rate, drop_rng)
        cache["layers"].append({"in_shape": a.shape, "xp": xp, "relu": relu, "conv_shape": z.shape,
                                "arg": arg, "factors": shapes["pool_factors"], "keep": keep})
        a = out

    flat = a.reshape(a.shape[0], -1)
    z_fc = flat @ p["fc.W"] + p["fc.b"]
    h_fc, relu_fc = _activate(z_fc, spec.activations[-1])
    h_fc, keep_fc = _dropout(h_fc, rate, drop_rng)
    logits = h_fc @ p["out.W"] + p["out.b"]
    probs = softmax(logits)
    cache.update(conv_out_shape=a.shape, flat=flat, relu_fc=relu_fc, keep_fc=keep_fc, h_fc=h_fc, probs=probs)
    return probs, cache


def decision_signature(cache: dict) -> Tuple[bytes, ...]:
    """Every ReLU gate and max-pool choice of a forward pass."""
    parts = []
    for layer in cache["layers"]:
        if layer["relu"] is not None:
            parts.append(np.packbits(layer["relu"]).tobytes())
        parts.append(layer["arg"].tobytes())
    if cache["relu_fc"] is not None:
        parts.append(np.packbits(cache["relu_fc"]).tobytes())
    return tuple(parts)


def bce(p1, y) -> np.ndarray:
    """Per-sample binary cross entropy on the clamped class-1 probability."""
    p = np.clip(np.asarray(p1, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)


def loss(probs: np.ndarray, y) -> float:
    """Mean binary cross entropy over the batch."""
    return float(bce(np.atleast_2d(probs)[:, 1], y).mean())


def backward(model: ConvNetModel, cache: dict, y) -> Dict[str, np.ndarray]:
    """Exact gradients of loss(probs, y) with respect to every parameter."""
    spec = model.spec
    p = model.params
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    probs = cache["probs"]
    n = probs.shape[0]

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    p1 = probs[:, 1]
    clamped = (p1 < PROB_CLAMP) | (p1 > 1.0 - PROB_CLAMP)
    dlogits = (probs - onehot) / n
    dlogits[clamped] = 0.0

    grads = {}
    grads["out.W"] = cache["h_fc"].T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dh = dlogits @ p["out.W"].T
    if cache["keep_fc"] is not None:
        dh = dh * cache["keep_fc"]
    if cache["relu_fc"] is not None:
        dh = dh * cache["relu_fc"]
    grads["fc.W"] = cache["flat"].T @ dh
    grads["fc.b"] = dh.sum(axis=0)
    da = (dh @ p["fc.W"].T).reshape(cache["conv_out_shape"])

    for layer in range(len(cache["layers"]), 0, -1):
        lc = cache["layers"][layer - 1]
        if lc["keep"] is not None:
            da = da * lc["keep"]
        dz = maxpool_backward(da, lc["arg"], lc["factors"], lc["conv_shape"])
        if lc["relu"] is not None:
            dz = dz * lc["relu"]
        da, dW, db = conv3d_backward(dz, lc["xp"], p[f"conv{layer}.W"], lc["in_shape"], spec.padding)
        grads[f"conv{layer}.W"] = dW
        grads[f"conv{layer}.b"] = db
    return {name: grads[name] for name in p}


def predict_proba(model: ConvNetModel, X: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Class-1 probability per input, evaluation mode (no dropout)."""
    X = np.asarray(X)
    out = []
    for start in range(0, X.shape[0], batch_size):
        probs, _ = forward(model, X[start:start + batch_size])
        out.append(probs[:, 1].astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class RMSprop:
    """a <- rho a + (1 - rho) g^2;  theta <- theta - lr g / sqrt(a + eps)."""

    def __init__(self, params: Dict[str, np.ndarray], rho: float = 0.9, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self.state = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            a = self.state[name]
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            params[name] -= (lr * g / np.sqrt(a + self.eps)).astype(params[name].dtype)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    train_accuracy: float


def train(spec: NetworkSpec, X: np.ndarray, y, cfg: TrainConfig = TrainConfig(),
          model: Optional[ConvNetModel] = None) -> Tuple[ConvNetModel, RMSprop, List[EpochLog]]:
    """
    RMSprop training on prepared inputs X (n, x, y, z, channels). Batches
    are reshuffled each epoch from a generator seeded by cfg.seed, which
    also drives dropout; training accuracy is measured after each epoch
    in evaluation mode.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyInputError("Training set is empty")
    if len(y) != X.shape[0]:
        raise PrognosisError(f"{X.shape[0]} inputs but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise SingleClassError("ConvNet training needs at least one study of each class")

    if model is None:
        model = ConvNetModel(spec, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    X = X.astype(model.dtype)
    rate = spec.dropout if cfg.dropout is None else cfg.dropout
    optimizer = RMSprop(model.params, cfg.rho, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    log: List[EpochLog] = []

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(X.shape[0])
        total = 0.0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            probs, cache = forward(model, X[idx], train=True, rng=rng, dropout=rate)
            batch_loss = loss(probs, y[idx])
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch, batch_loss)
            total += batch_loss * len(idx)
            optimizer.step(model.params, backward(model, cache, y[idx]), lr)

        acc = float(np.mean((predict_proba(model, X, cfg.batch_size) >= 0.5) == (y == 1)))
        log.append(EpochLog(epoch, lr, total / X.shape[0], acc))
        logger.debug("epoch %d lr=%.3g loss=%.5f acc=%.3f", epoch, lr, total / X.shape[0], acc)
        if cfg.stop_at_accuracy is not None and acc >= cfg.stop_at_accuracy:
            logger.info("Stopping at epoch %d: training accuracy %.3f", epoch, acc)
            break
    return model, optimizer, log


def train_on_studies(spec: NetworkSpec, studies: Sequence[StudyRecord], cfg: TrainConfig = TrainConfig(),
                     downsample: Sequence[int] = (1, 1, 1)):
    X = np.stack([prepare_input(s, downsample) for s in studies]) if studies else np.zeros((0,))
    return train(spec, X, [s.label for s in studies], cfg)


def write_training_log(log: Sequence[EpochLog], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for e in log:
            writer.writerow([e.epoch, repr(e.lr), repr(e.mean_loss), repr(e.train_accuracy)])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_network(path: str, model: ConvNetModel, optimizer: Optional[RMSprop] = None,
                 cfg: Optional[TrainConfig] = None) -> None:
    """
    .npz archive with a JSON header, parameters and RMSprop state. Entries
    are written in sorted order with a fixed zip timestamp so identical
    networks produce identical files.
    """
    header = {"format": NET_FORMAT, "version": NET_VERSION, "spec": model.spec.to_dict(),
              "dtype": model.dtype.name, "train_config": None if cfg is None else asdict(cfg)}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    arrays.update({f"param.{k}": v for k, v in model.params.items()})
    if optimizer is not None:
        arrays.update({f"rms.{k}": v for k, v in optimizer.state.items()})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asarray(arrays[name]), allow_pickle=False)


def load_network(path: str) -> Tuple[ConvNetModel, Optional[Dict[str, np.ndarray]], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != NET_FORMAT or header.get("version") != NET_VERSION:
            raise PrognosisError(f"{path} is not a version {NET_VERSION} ConvNet file")
        spec = NetworkSpec.from_dict(header["spec"])
        model = ConvNetModel(spec, dtype=np.dtype(header["dtype"]))
        model.set_weights({k[len("param."):]: data[k] for k in data.files if k.startswith("param.")})
        rms = {k[len("rms."):]: data[k].copy() for k in data.files if k.startswith("rms.")} or None
    return model, rms, header
