"""A small NumPy convolution engine for the steering network.

Tensors are plain ``ndarray``s in NCHW layout. The production path runs in
float32; passing ``dtype=np.float64`` gives the shadow mode used by the
gradient checks.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PLTN"
FORMAT_VERSION = 1


class NetworkError(ValueError):
    pass


class CheckpointError(Exception):
    """Raised by ``load_checkpoint``; ``code`` tells the failure modes apart."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Conv:
    out: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple = (3, 66, 200)
    convs: tuple = (Conv(24, 5, 2), Conv(36, 5, 2), Conv(48, 5, 2), Conv(64, 3, 1), Conv(64, 3, 1))
    hidden: tuple = (100, 50, 10)
    outputs: int = 1

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "convs": [[c.out, c.kernel, c.stride] for c in self.convs],
                "hidden": list(self.hidden), "outputs": self.outputs}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(Conv(*c) for c in d["convs"]),
                   tuple(d["hidden"]), d["outputs"])

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def conv_shapes(self) -> list:
        """(C_in, H_in, W_in, C_out, H_out, W_out) per conv layer."""
        c, h, w = self.input_shape
        shapes = []
        for cv in self.convs:
            oh = (h - cv.kernel) // cv.stride + 1
            ow = (w - cv.kernel) // cv.stride + 1
            if oh < 1 or ow < 1:
                raise NetworkError(f"input {self.input_shape} too small for conv stack")
            shapes.append((c, h, w, cv.out, oh, ow))
            c, h, w = cv.out, oh, ow
        return shapes

    def flat_size(self) -> int:
        if not self.convs:
            return int(np.prod(self.input_shape))
        _, _, _, c, h, w = self.conv_shapes()[-1]
        return c * h * w

    def fc_sizes(self) -> list:
        sizes = [self.flat_size(), *self.hidden, self.outputs]
        return list(zip(sizes[:-1], sizes[1:]))

    def layer_names(self) -> list:
        return (["normalize"] + [f"conv{i + 1}" for i in range(len(self.convs))] + ["flatten"]
                + [f"fc{i + 1}" for i in range(len(self.hidden) + 1)])

    def param_shapes(self) -> list:
        shapes = []
        for (cin, _, _, cout, _, _), cv in zip(self.conv_shapes(), self.convs):
            shapes += [(cout, cin, cv.kernel, cv.kernel), (cout,)]
        for nin, nout in self.fc_sizes():
            shapes += [(nout, nin), (nout,)]
        return shapes


DEFAULT_SPEC = NetworkSpec()


def param_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(s) for s in spec.param_shapes()))


def connection_count(spec: NetworkSpec) -> int:
    """Weighted connections including bias, summed over every output unit."""
    total = 0
    for (cin, _, _, cout, oh, ow), cv in zip(spec.conv_shapes(), spec.convs):
        total += oh * ow * cout * (cv.kernel * cv.kernel * cin + 1)
    for nin, nout in spec.fc_sizes():
        total += (nin + 1) * nout
    return total


HEAD_INIT_SCALE = 0.01


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> list:
    """He-normal weights, zero biases, in declaration order [W1, b1, W2, b2, ...].

    The output layer is shrunk by ``HEAD_INIT_SCALE`` so that initial predictions
    sit at the scale of curvature labels (~1e-2 1/m) instead of O(1).
    """
    rng = np.random.default_rng(seed)
    shapes = spec.param_shapes()
    params = []
    for i, shape in enumerate(shapes):
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if i == len(shapes) - 2:
                w = w * HEAD_INIT_SCALE
            params.append(w.astype(dtype))
    return params


def normalize(x: np.ndarray) -> np.ndarray:
    """Fixed map of byte-range values onto [-1, 1]."""
    return x / x.dtype.type(127.5) - x.dtype.type(1.0)


@dataclass
class Activations:
    """Per-layer tensors kept by ``forward``.

    Conv tensors are stored channel-major ``(C, N, H, W)``; ``conv_maps``
    returns them as ``(N, C, H, W)``.
    """
    fingerprint: bytes
    batch: int
    inputs: list = field(default_factory=list)     # per parametric layer: cols or flat input
    outputs: list = field(default_factory=list)    # per parametric layer: post-activation

    def conv_maps(self, layer: int) -> np.ndarray:
        return self.outputs[layer].transpose(1, 0, 2, 3)


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(C, N, H, W) -> (C*k*k, N*oh*ow) patch matrix."""
    c, n, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = x[:, :, a:a + s * oh:s, b:b + s * ow:s]
    return cols.reshape(c * k * k, n * oh * ow)


def forward(spec: NetworkSpec, weights: list, x: np.ndarray, dtype=np.float32):
    """Run the network on one ``(C, H, W)`` image or an ``(N, C, H, W)`` batch.

    Returns the prediction (a float for a single image, an ``(N,)`` array for
    a batch) and the activations kept for backprop and visualization.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise NetworkError(f"input shape {tuple(x.shape[1:])} != {tuple(spec.input_shape)}")
    if len(weights) != len(spec.param_shapes()):
        raise NetworkError("weights do not match the network spec")
    n = x.shape[0]
    acts = Activations(spec.fingerprint(), n)
    h = normalize(np.ascontiguousarray(np.asarray(x, dtype=dtype).transpose(1, 0, 2, 3)))
    wi = 0
    for (_, _, _, cout, oh, ow), cv in zip(spec.conv_shapes(), spec.convs):
        W, b = weights[wi].astype(dtype, copy=False), weights[wi + 1].astype(dtype, copy=False)
        cols = _im2col(h, cv.kernel, cv.stride)
        z = W.reshape(cout, -1) @ cols
        z += b[:, None]
        h = np.maximum(z, 0, out=z).reshape(cout, n, oh, ow)
        acts.inputs.append(cols)
        acts.outputs.append(h)
        wi += 2
    h = h.transpose(1, 0, 2, 3).reshape(n, -1)
    n_fc = len(spec.fc_sizes())
    for j in range(n_fc):
        W, b = weights[wi].astype(dtype, copy=False), weights[wi + 1].astype(dtype, copy=False)
        acts.inputs.append(h)
        h = h @ W.T + b
        if j < n_fc - 1:
            h = np.maximum(h, 0)
        acts.outputs.append(h)
        wi += 2
    pred = h[:, 0] if spec.outputs == 1 else h
    if single:
        return (float(pred[0]) if spec.outputs == 1 else pred[0]), acts
    return pred, acts


def predict(spec: NetworkSpec, weights: list, x: np.ndarray, dtype=np.float32):
    return forward(spec, weights, x, dtype)[0]


def mse_loss(pred, label) -> float:
    """Mean over the batch of squared errors."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    return float(np.mean(d * d))


def mse_loss_grad(pred, label) -> np.ndarray:
    """Per-sample derivative of the squared error with respect to the prediction."""
    return 2.0 * (np.atleast_1d(np.asarray(pred)) - np.atleast_1d(np.asarray(label)))


def backward(spec: NetworkSpec, weights: list, acts: Activations, loss_grad) -> list:
    """Gradients of the batch-mean loss given per-sample ``dloss/dpred``."""
    if acts.fingerprint != spec.fingerprint():
        raise NetworkError("activations were produced by a different network spec")
    g = np.asarray(loss_grad)
    dtype = acts.outputs[-1].dtype
    g = g.reshape(acts.batch, spec.outputs).astype(dtype) / dtype.type(acts.batch)
    grads = [None] * len(weights)
    n_conv = len(spec.convs)
    n_fc = len(spec.fc_sizes())
    wi = len(weights) - 2
    for j in range(n_fc - 1, -1, -1):
        li = n_conv + j
        if j < n_fc - 1:
            g = g * (acts.outputs[li] > 0)
        x_in = acts.inputs[li]
        grads[wi] = g.T @ x_in
        grads[wi + 1] = g.sum(axis=0)
        g = g @ weights[wi].astype(dtype, copy=False)
        wi -= 2
    if n_conv == 0:
        return grads
    shapes = spec.conv_shapes()
    _, _, _, c, h, w = shapes[-1]
    g = np.ascontiguousarray(g.reshape(acts.batch, c, h, w).transpose(1, 0, 2, 3))
    for li in range(n_conv - 1, -1, -1):
        cv = spec.convs[li]
        cin, hin, win, cout, oh, ow = shapes[li]
        g = g * (acts.outputs[li] > 0)
        gm = g.reshape(cout, -1)
        W = weights[wi].astype(dtype, copy=False)
        grads[wi] = (gm @ acts.inputs[li].T).reshape(W.shape)
        grads[wi + 1] = gm.sum(axis=1)
        if li > 0:
            k, s = cv.kernel, cv.stride
            dcols = (W.reshape(cout, -1).T @ gm).reshape(cin, k, k, acts.batch, oh, ow)
            dx = np.zeros((cin, acts.batch, hin, win), dtype=dtype)
            for a in range(k):
                for b in range(k):
                    dx[:, :, a:a + s * oh:s, b:b + s * ow:s] += dcols[:, a, b]
            g = dx
        wi -= 2
    return grads


class SGD:
    """Momentum SGD: ``v <- mu * v + g``, ``w <- w - lr * v``."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, weights: list, grads: list) -> list:
        if len(grads) != len(weights):
            raise NetworkError("gradient list does not match weights")
        for g, w in zip(grads, weights):
            if g.shape != w.shape:
                raise NetworkError(f"gradient shape {g.shape} != weight shape {w.shape}")
            if not np.all(np.isfinite(g)):
                raise NetworkError("non-finite gradient")
        if self.velocity is None:
            self.velocity = [np.zeros_like(w) for w in weights]
        out = []
        for i, (w, g) in enumerate(zip(weights, grads)):
            v = self.velocity[i] * w.dtype.type(self.momentum) + g.astype(w.dtype)
            self.velocity[i] = v
            out.append(w - w.dtype.type(self.lr) * v)
        return out


def sgd_step(weights: list, grads: list, lr: float, momentum: float = 0.0, velocity=None):
    """Functional form of :class:`SGD`; returns ``(weights, velocity)``."""
    opt = SGD(lr, momentum)
    opt.velocity = velocity
    return opt.step(weights, grads), opt.velocity


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: list
    metadata: dict = field(default_factory=dict)

    def predict(self, x: np.ndarray):
        return predict(self.spec, self.weights, x)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    shapes = ckpt.spec.param_shapes()
    if [tuple(w.shape) for w in ckpt.weights] != [tuple(s) for s in shapes]:
        raise NetworkError("weights do not match the network spec")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(ckpt.spec.fingerprint())
    for w in ckpt.weights:
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    meta = dict(ckpt.metadata)
    meta["spec"] = ckpt.spec.to_dict()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes, spec: NetworkSpec | None = None) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad_magic", "not a checkpoint file (bad magic)")
    if len(data) < 38:
        raise CheckpointError("corrupt", "truncated checkpoint header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError("bad_version", f"unsupported checkpoint version {version}")
    fp = data[6:38]
    pos = 38
    if spec is not None and fp != spec.fingerprint():
        raise CheckpointError("fingerprint", "checkpoint was written for a different network spec")
    probe = spec or DEFAULT_SPEC
    shapes = probe.param_shapes() if fp == probe.fingerprint() else None
    if shapes is None:
        # spec unknown up front: read it from the metadata trailer
        meta = _read_meta(data)
        probe = NetworkSpec.from_dict(meta["spec"])
        if probe.fingerprint() != fp:
            raise CheckpointError("fingerprint", "metadata spec does not match header fingerprint")
        shapes = probe.param_shapes()
    weights = []
    for shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise CheckpointError("corrupt", "truncated weight data")
        weights.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos)
                       .reshape(shape).astype(np.float32))
        pos += nbytes
    if pos + 4 > len(data):
        raise CheckpointError("corrupt", "missing metadata block")
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + mlen != len(data):
        raise CheckpointError("corrupt", "metadata length does not match file size")
    try:
        meta = json.loads(data[pos:pos + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("corrupt", f"unreadable metadata: {e}") from e
    meta.pop("spec", None)
    return Checkpoint(probe, weights, meta)


def _read_meta(data: bytes) -> dict:
    # The trailer is a length-prefixed JSON object running to the end of the file.
    start = len(data)
    while True:
        start = data.rfind(b"{", 42, start)
        if start < 0:
            raise CheckpointError("corrupt", "cannot locate metadata block")
        (mlen,) = struct.unpack_from("<I", data, start - 4)
        if start + mlen == len(data):
            try:
                return json.loads(data[start:].decode())
            except (UnicodeDecodeError, json.JSONDecodeError):
                pass


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError("corrupt", f"cannot read {path}: {e}") from e
    return parse_checkpoint(data, spec)
