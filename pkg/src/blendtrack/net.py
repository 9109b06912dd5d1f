"""Small convolutional regressor with manual differentiation.

Architecture (NHWC, fixed):

    conv 3x3 stride 2 pad 1, 8ch -> relu
    conv 3x3 stride 2 pad 1, 16ch -> relu
    conv 3x3 stride 2 pad 1, 32ch -> relu
    flatten -> dense 128 -> relu -> dense 34 -> sigmoid

The sigmoid bounds all 34 outputs to (0, 1). Training minimizes the
label-weighted L1 loss mean(|p - y| * 50**y), which penalizes missing an
active blend shape 50x harder than falsely activating one.

Parameters are stored as float32 (matching the weight-file payload exactly);
all forward/backward arithmetic runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

OUTPUT_DIM = 34
CONV_CHANNELS = (8, 16, 32)
DENSE_HIDDEN = 128

WEIGHTS_MAGIC = b"BTRK"
WEIGHTS_VERSION = 1
_DTYPE_F32 = 0
_INPUT_SPEC_RECORD = "input_spec"


class WeightFileError(ValueError):
    """Raised for malformed or inconsistent weight files."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


def conv_out_size(size: int) -> int:
    """Output extent of one 3x3 stride-2 pad-1 convolution."""
    return (size + 1) // 2


class Conv2d:
    """3x3 stride-2 convolution with pad 1, NHWC layout."""

    def __init__(self, name: str, in_ch: int, out_ch: int):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.w = np.zeros((3, 3, in_ch, out_ch), dtype=np.float32)
        self.b = np.zeros(out_ch, dtype=np.float32)

    def params(self):
        return {"w": self.w, "b": self.b}

    def init_params(self, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(9 * self.in_ch)
        self.w = rng.uniform(-bound, bound, self.w.shape).astype(np.float32)
        self.b = np.zeros(self.out_ch, dtype=np.float32)

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        oh, ow = conv_out_size(h), conv_out_size(w)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # im2col: one (N*OH*OW, 9*Cin) patch matrix, then a single matmul
        cols = np.empty((n, oh, ow, 9, c))
        for k in range(9):
            di, dj = divmod(k, 3)
            cols[:, :, :, k, :] = xp[:, di:di + 2 * oh - 1:2, dj:dj + 2 * ow - 1:2, :]
        cols2 = cols.reshape(n * oh * ow, 9 * c)
        w2 = self.w.astype(np.float64).reshape(9 * c, self.out_ch)
        y = (cols2 @ w2).reshape(n, oh, ow, self.out_ch) + self.b.astype(np.float64)
        return y, (cols2, (n, h, w, c))

    def backward(self, dout: np.ndarray, cache):
        cols2, (n, h, w, c) = cache
        oh, ow = dout.shape[1], dout.shape[2]
        dout2 = dout.reshape(n * oh * ow, self.out_ch)
        w2 = self.w.astype(np.float64).reshape(9 * c, self.out_ch)
        dw = (cols2.T @ dout2).reshape(3, 3, c, self.out_ch)
        db = dout2.sum(axis=0)
        dcols = (dout2 @ w2.T).reshape(n, oh, ow, 9, c)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for k in range(9):
            di, dj = divmod(k, 3)
            dxp[:, di:di + 2 * oh - 1:2, dj:dj + 2 * ow - 1:2, :] += dcols[:, :, :, k, :]
        return dxp[:, 1:-1, 1:-1, :], {"w": dw, "b": db}


class Dense:
    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = np.zeros((in_dim, out_dim), dtype=np.float32)
        self.b = np.zeros(out_dim, dtype=np.float32)

    def params(self):
        return {"w": self.w, "b": self.b}

    def init_params(self, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(self.in_dim)
        self.w = rng.uniform(-bound, bound, self.w.shape).astype(np.float32)
        self.b = np.zeros(self.out_dim, dtype=np.float32)

    def forward(self, x: np.ndarray):
        if x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input dim {self.in_dim}, got {x.shape[1]}")
        return x @ self.w.astype(np.float64) + self.b.astype(np.float64), x

    def backward(self, dout: np.ndarray, x: np.ndarray):
        dw = x.T @ dout
        db = dout.sum(axis=0)
        dx = dout @ self.w.astype(np.float64).T
        return dx, {"w": dw, "b": db}


class ReLU:
    name = "relu"

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        return np.maximum(x, 0.0), x

    def backward(self, dout: np.ndarray, x: np.ndarray):
        return np.where(x > 0.0, dout, 0.0), {}


class Sigmoid:
    name = "sigmoid"

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, dout: np.ndarray, y: np.ndarray):
        return dout * y * (1.0 - y), {}


class Flatten:
    name = "flatten"

    def params(self):
        return {}

    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout: np.ndarray, shape):
        return dout.reshape(shape), {}


class RegressorModel:
    """The fixed conv stack mapping (N, h, w, 3) images to (N, 34) weights."""

    def __init__(self, input_h: int = 64, input_w: int = 64):
        if input_h < 8 or input_w < 8:
            raise ValueError(f"input size must be at least 8x8, got {input_h}x{input_w}")
        self.input_h = input_h
        self.input_w = input_w
        fh, fw = input_h, input_w
        for _ in CONV_CHANNELS:
            fh, fw = conv_out_size(fh), conv_out_size(fw)
        self.flat_dim = fh * fw * CONV_CHANNELS[-1]
        self.layers = [
            Conv2d("conv1", 3, CONV_CHANNELS[0]),
            ReLU(),
            Conv2d("conv2", CONV_CHANNELS[0], CONV_CHANNELS[1]),
            ReLU(),
            Conv2d("conv3", CONV_CHANNELS[1], CONV_CHANNELS[2]),
            ReLU(),
            Flatten(),
            Dense("dense1", self.flat_dim, DENSE_HIDDEN),
            ReLU(),
            Dense("dense2", DENSE_HIDDEN, OUTPUT_DIM),
            Sigmoid(),
        ]

    def initialize(self, seed: int) -> "RegressorModel":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if layer.params():
                layer.init_params(rng)
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in fixed traversal order (live views)."""
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            for key, arr in layer.params().items():
                out[f"{layer.name}/{key}"] = arr
        return out

    def set_parameter(self, name: str, value: np.ndarray):
        layer_name, key = name.split("/")
        for layer in self.layers:
            if layer.name == layer_name and key in layer.params():
                current = layer.params()[key]
                if current.shape != value.shape:
                    raise WeightFileError(
                        f"shape mismatch for {name}: file {value.shape} vs architecture {current.shape}"
                    )
                setattr(layer, key, value.astype(np.float32))
                return
        raise WeightFileError(f"unknown parameter {name!r}")

    def copy(self) -> "RegressorModel":
        dup = RegressorModel(self.input_h, self.input_w)
        for name, arr in self.parameters().items():
            dup.set_parameter(name, arr.copy())
        return dup

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (self.input_h, self.input_w, 3):
            raise ValueError(
                f"batch shape {x.shape} does not match input spec "
                f"(N, {self.input_h}, {self.input_w}, 3)"
            )
        return x

    def forward(self, batch: np.ndarray) -> np.ndarray:
        x = self._check_batch(batch)
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward_with_caches(self, batch: np.ndarray):
        x = self._check_batch(batch)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches


def weighted_l1_loss(pred: np.ndarray, label: np.ndarray, scale_base: float = 50.0) -> float:
    """Mean over all entries of |pred - label| * scale_base**label."""
    p, y = _check_pair(pred, label)
    return float(np.mean(np.abs(p - y) * scale_base ** y))


def _check_pair(pred, label):
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs label {y.shape}")
    return p, y


def _loss_and_grads(model: RegressorModel, batch, labels, scale_base: float = 50.0):
    pred, caches = model.forward_with_caches(batch)
    p, y = _check_pair(pred, labels)
    scale = scale_base ** y
    loss = float(np.mean(np.abs(p - y) * scale))
    # Subgradient of |.| at 0 is taken as 0 (np.sign(0) == 0).
    dpred = np.sign(p - y) * scale / p.size
    grads: dict[str, np.ndarray] = {}
    dout = dpred
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        dout, layer_grads = layer.backward(dout, cache)
        for key, g in layer_grads.items():
            grads[f"{layer.name}/{key}"] = g
    return loss, grads


def backward(model: RegressorModel, batch, labels, scale_base: float = 50.0) -> dict[str, np.ndarray]:
    """Analytic gradients of the weighted L1 loss w.r.t. every parameter."""
    _, grads = _loss_and_grads(model, batch, labels, scale_base)
    return grads


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(model: RegressorModel, learning_rate: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), epsilon: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate=learning_rate, beta1=betas[0], beta2=betas[1], epsilon=epsilon)
    for name, arr in model.parameters().items():
        state.m[name] = np.zeros(arr.shape, dtype=np.float64)
        state.v[name] = np.zeros(arr.shape, dtype=np.float64)
    return state


def train_step(model: RegressorModel, state: AdamState, batch, labels,
               scale_base: float = 50.0) -> float:
    """One optimizer update in place; returns the pre-update loss."""
    loss, grads = _loss_and_grads(model, batch, labels, scale_base)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss: {loss}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, param in model.parameters().items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        update = param.astype(np.float64) - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        param[...] = update.astype(np.float32)
    return loss


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_gradients(loss_fn, params: dict[str, np.ndarray], epsilon: float = 1e-4):
    """Central finite differences of `loss_fn()` w.r.t. every entry of `params`.

    Parameters are perturbed in place (float64 arrays expected) and restored.
    """
    fd = {name: np.zeros(arr.shape) for name, arr in params.items()}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        out = fd[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * epsilon)
    return fd


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a| + |n|, 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def gradient_check(model: RegressorModel, batch, labels, epsilon: float = 1e-4,
                   scale_base: float = 50.0) -> float:
    """Compare analytic gradients against central differences for every parameter.

    Returns the worst relative error over all parameters. Labels should stay
    clear of the L1 kink (|pred - label| >> epsilon) for the comparison to be
    meaningful.
    """
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _, analytic = _loss_and_grads(model, x, y, scale_base)
    params = model.parameters()
    numeric = finite_difference_gradients(
        lambda: weighted_l1_loss(model.forward(x), y, scale_base), params, epsilon
    )
    return max(relative_gradient_error(analytic[name], numeric[name]) for name in params)


# ---------------------------------------------------------------------------
# Weight file I/O (binary, little-endian)
# ---------------------------------------------------------------------------

def save_weights(model: RegressorModel, path) -> None:
    """Write magic/version, then one record per tensor: input spec plus params."""
    records = [(_INPUT_SPEC_RECORD, np.array([model.input_h, model.input_w, 3], dtype=np.float32))]
    records += [(name, arr) for name, arr in model.parameters().items()]
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(records)))
        for name, arr in records:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_weights(path) -> RegressorModel:
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"unexpected end of file while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != WEIGHTS_MAGIC:
        raise WeightFileError("bad magic: not a blendtrack weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")

    records: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "record name length"))
        name = bytes(take(name_len, "record name")).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, "record dtype/rank"))
        if dtype != _DTYPE_F32:
            raise WeightFileError(f"record {name!r}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"record {name!r} dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size, f"record {name!r} payload")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        order.append(name)
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last record")

    if _INPUT_SPEC_RECORD not in records:
        raise WeightFileError("missing input_spec record")
    spec = records.pop(_INPUT_SPEC_RECORD)
    if spec.shape != (3,) or spec[2] != 3.0:
        raise WeightFileError(f"bad input_spec record: {spec}")
    model = RegressorModel(int(spec[0]), int(spec[1]))
    expected = set(model.parameters())
    got = set(records)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise WeightFileError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, arr in records.items():
        model.set_parameter(name, arr)
    return model
