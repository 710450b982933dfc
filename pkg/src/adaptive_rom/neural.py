"""CROM-style autoencoder in plain numpy.

The encoder maps a stacked displacement field (3n) to a latent p (r); the
decoder maps ``[p, x_i]`` to the displacement of material point ``x_i``.
Displacements are scaled by the dataset max-abs and coordinates mapped to
[-1, 1] per axis; every public function works in physical units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TetMesh

logger = logging.getLogger(__name__)

MAGIC = "CROMMODEL1"
ACTIVATIONS = ("elu", "identity")


class TrainingError(RuntimeError):
    pass


def elu(z):
    # expm1(z) >= z everywhere, so the max picks the right branch
    return np.maximum(np.expm1(np.minimum(z, 0)), z)


def elu_grad(z):
    return np.exp(np.minimum(z, 0))


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "elu"


@dataclass
class MlpModel:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("layer dimensions do not chain")
        if self.layers[-1].activation != "identity":
            raise ValueError("last layer must be linear")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list:
        return [a for layer in self.layers for a in (layer.weight, layer.bias)]

    def forward(self, x, cache: list | None = None):
        for layer in self.layers:
            if cache is not None:
                cache.append(x)
            z = x @ layer.weight + layer.bias
            if layer.activation == "elu":
                if cache is not None:
                    cache.append(z)
                x = elu(z)
            else:
                if cache is not None:
                    cache.append(None)
                x = z
        return x

    def backward(self, cache: list, grad_out):
        """Parameter gradients (same order as :meth:`params`) and input gradient."""
        grads = []
        g = grad_out
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            x_in, z = cache[2 * k], cache[2 * k + 1]
            if layer.activation == "elu":
                g = g * elu_grad(z)
            grads.append(g.sum(axis=0))
            grads.append(x_in.T @ g)
            g = g @ layer.weight.T
        return grads[::-1], g


def init_mlp(sizes, rng: np.random.Generator, hidden_activation: str = "elu") -> MlpModel:
    """Uniform He-style initialization, bound sqrt(6 / fan_in)."""
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = "identity" if k == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(layers)


@dataclass
class CromModel:
    encoder: MlpModel
    decoder: MlpModel
    r: int
    n: int
    u_scale: float = 1.0
    x_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    x_half: np.ndarray = field(default_factory=lambda: np.ones(3))
    _lowp: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.encoder.input_dim != 3 * self.n or self.encoder.output_dim != self.r:
            raise ValueError("encoder must map 3n -> r")
        if self.decoder.input_dim != self.r + 3 or self.decoder.output_dim != 3:
            raise ValueError("decoder must map r + 3 -> 3")

    @classmethod
    def create(
        cls,
        mesh: TetMesh,
        r: int,
        *,
        snapshots: np.ndarray | None = None,
        encoder_hidden=(128, 128),
        decoder_hidden=(128,) * 8,
        seed: int = 0,
    ) -> "CromModel":
        rng = np.random.default_rng(seed)
        n = mesh.n
        enc = init_mlp([3 * n, *encoder_hidden, r], rng)
        dec = init_mlp([r + 3, *decoder_hidden, 3], rng)
        lo, hi = mesh.bounding_box()
        half = np.where(hi > lo, 0.5 * (hi - lo), 1.0)
        scale = 1.0
        if snapshots is not None and np.size(snapshots):
            scale = float(np.max(np.abs(snapshots))) or 1.0
        return cls(enc, dec, r, n, scale, 0.5 * (lo + hi), half)

    def normalized_points(self, mesh: TetMesh) -> np.ndarray:
        return (mesh.nodes - self.x_center) / self.x_half


def _check_len(vec, expected, what):
    if vec.shape[-1] != expected:
        raise ValueError(f"{what} has length {vec.shape[-1]}, expected {expected}")


def encode(model: CromModel, u: np.ndarray) -> np.ndarray:
    """Latent code of one displacement field (3n,) or a batch (B, 3n)."""
    u = np.asarray(u, dtype=float)
    _check_len(u, 3 * model.n, "displacement")
    return model.encoder.forward(u / model.u_scale)


def _decoder_input(model, p, xn):
    return np.concatenate([np.broadcast_to(p, (xn.shape[0], model.r)), xn], axis=1)


def decode_full(model: CromModel, p: np.ndarray, mesh: TetMesh) -> np.ndarray:
    """Stacked displacement field (3n,) of the decoder evaluated at every node."""
    p = np.asarray(p, dtype=float)
    _check_len(p, model.r, "latent")
    out = model.decoder.forward(_decoder_input(model, p, model.normalized_points(mesh)))
    return (out * model.u_scale).ravel()


def _decoder_in(model: CromModel, dtype) -> MlpModel:
    """The decoder with parameters in ``dtype`` (cached copy for reduced precision)."""
    dtype = np.dtype(dtype)
    if dtype == model.decoder.layers[0].weight.dtype:
        return model.decoder
    key = (dtype.str, id(model.decoder.layers[0].weight))
    if key not in model._lowp:
        model._lowp.clear()
        layers = [Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in model.decoder.layers]
        model._lowp[key] = MlpModel(layers)
    return model._lowp[key]


def latent_jacobian(model: CromModel, p: np.ndarray, mesh: TetMesh, dtype=np.float64, nodes=None) -> np.ndarray:
    """d decode_full / dp as a (3n, r) matrix.

    Exact; accumulated in reverse over the decoder with the three output
    components of every node as seeds (3 seeds per node instead of r).
    ``dtype=np.float32`` evaluates the same recursion in single precision
    (relative error ~1e-6), returned as float64. With ``nodes`` only those
    nodes' rows are computed and the result has shape (3 len(nodes), r).
    """
    p = np.asarray(p, dtype=float)
    _check_len(p, model.r, "latent")
    decoder = _decoder_in(model, dtype)
    xn = model.normalized_points(mesh)
    if nodes is not None:
        xn = xn[nodes]
    x = _decoder_input(model, p, xn).astype(dtype, copy=False)
    cache = []
    decoder.forward(x, cache)
    layers = decoder.layers
    n = xn.shape[0]
    # rows are (node, output component) seeds, flattened so each layer is one GEMM
    last = layers[-1].weight
    adj = np.tile((last[: model.r] if len(layers) == 1 else last).T, (n, 1))
    for k in range(len(layers) - 2, -1, -1):
        z = cache[2 * k + 1]
        adj = (adj.reshape(n, 3, -1) * elu_grad(z)[:, None, :]).reshape(3 * n, -1)
        adj = adj @ (layers[k].weight[: model.r] if k == 0 else layers[k].weight).T
    return adj.astype(np.float64, copy=False) * model.u_scale


# ----------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs_per_phase: int = 100
    phases: int = 4
    learning_rates: tuple = (5.0, 2.0, 1.0, 0.5)
    lr_scale: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # random subset of nodes per snapshot in each batch; None uses all nodes
    nodes_per_sample: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        if len(self.learning_rates) != self.phases or min(self.learning_rates) < 0:
            raise ValueError("need one non-negative learning rate per phase")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def schedule(self) -> list:
        return [lr * self.lr_scale for lr in self.learning_rates for _ in range(self.epochs_per_phase)]


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def reconstruction_loss(model: CromModel, snapshots: np.ndarray, mesh: TetMesh) -> float:
    """Mean squared per-node reconstruction error in normalized units; snapshots are columns."""
    U = np.asarray(snapshots, dtype=float).T / model.u_scale
    P = model.encoder.forward(U)
    xn = model.normalized_points(mesh)
    total = 0.0
    for p, u in zip(P, U):
        out = model.decoder.forward(_decoder_input(model, p, xn))
        total += float(np.sum((out - u.reshape(-1, 3)) ** 2))
    return total / (U.shape[0] * mesh.n)


def _loss_and_grads(model, U, xn, node_idx):
    B, n_s = U.shape[0], node_idx.shape[1]
    enc_cache, dec_cache = [], []
    P = model.encoder.forward(U, enc_cache)
    inp = np.concatenate([np.repeat(P, n_s, axis=0), xn[node_idx].reshape(-1, 3)], axis=1)
    out = model.decoder.forward(inp, dec_cache)
    target = U.reshape(B, -1, 3)[np.arange(B)[:, None], node_idx].reshape(-1, 3)
    diff = out - target
    loss = float(np.sum(diff * diff)) / (B * n_s)
    dec_grads, g_in = model.decoder.backward(dec_cache, 2.0 * diff / (B * n_s))
    g_p = g_in[:, : model.r].reshape(B, n_s, model.r).sum(axis=1)
    enc_grads, _ = model.encoder.backward(enc_cache, g_p)
    return loss, enc_grads + dec_grads


def train(model: CromModel, snapshots: np.ndarray, mesh: TetMesh, cfg: TrainConfig | None = None):
    """Fit encoder and decoder jointly with Adam; returns ``(model, per-epoch losses)``.

    ``snapshots`` holds one displacement field per column. The model is
    updated in place.
    """
    cfg = cfg or TrainConfig()
    D = np.asarray(snapshots, dtype=float)
    if D.ndim != 2 or D.shape[1] == 0:
        raise ValueError("need a non-empty (3n, count) snapshot matrix")
    _check_len(D.T, 3 * model.n, "snapshot")
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    U = (D.T / model.u_scale).astype(dtype)
    xn = model.normalized_points(mesh).astype(dtype)
    n = mesh.n
    _cast(model, dtype)
    params = model.encoder.params() + model.decoder.params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for epoch, lr in enumerate(cfg.schedule()):
        order = rng.permutation(U.shape[0])
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if cfg.nodes_per_sample and cfg.nodes_per_sample < n:
                node_idx = np.stack([rng.choice(n, cfg.nodes_per_sample, replace=False) for _ in idx])
            else:
                node_idx = np.broadcast_to(np.arange(n), (len(idx), n))
            loss, grads = _loss_and_grads(model, U[idx], xn, node_idx)
            lr = dtype.type(lr)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(grads, lr)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        if epoch % 50 == 0 or epoch == len(cfg.schedule()) - 1:
            logger.info("epoch %d lr %.2e loss %.4e", epoch, lr, history[-1])
    _cast(model, np.float64)
    return model, history


def _cast(model: CromModel, dtype) -> None:
    model._lowp.clear()
    for mlp in (model.encoder, model.decoder):
        for layer in mlp.layers:
            if layer.weight.dtype != dtype:
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)


# ---------------------------------------------------------------- model file


def save_model(model: CromModel, path) -> None:
    layers = [("encoder", model.encoder), ("decoder", model.decoder)]
    head = [
        MAGIC,
        f"r {model.r}",
        f"n {model.n}",
        f"u_scale {model.u_scale!r}",
        "x_center " + " ".join(repr(float(v)) for v in model.x_center),
        "x_half " + " ".join(repr(float(v)) for v in model.x_half),
    ]
    for name, mlp in layers:
        dims = [mlp.input_dim] + [lay.weight.shape[1] for lay in mlp.layers]
        head.append(f"{name} " + " ".join(map(str, dims)) + " | " + " ".join(l.activation for l in mlp.layers))
    head.append("end")
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, mlp in layers for a in mlp.params()
    )
    Path(path).write_bytes(("\n".join(head) + "\n").encode() + blob)


def load_model(path) -> CromModel:
    raw = Path(path).read_bytes()
    end = raw.index(b"\nend\n") + len(b"\nend\n")
    lines = raw[:end].decode().splitlines()
    if lines[0] != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    kv = {ln.split(" ", 1)[0]: ln.split(" ", 1)[1] for ln in lines[1:-1]}
    buf = np.frombuffer(raw[end:], dtype="<f8")
    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        arr = buf[offset : offset + size].reshape(shape).astype(float)
        offset += size
        return arr

    mlps = {}
    for name in ("encoder", "decoder"):
        dims_s, acts_s = kv[name].split("|")
        dims = [int(v) for v in dims_s.split()]
        acts = acts_s.split()
        mlps[name] = MlpModel(
            [Layer(take((a, b)), take((b,)), act) for a, b, act in zip(dims[:-1], dims[1:], acts)]
        )
    if offset != buf.size:
        raise ValueError(f"{path}: trailing parameter data")
    return CromModel(
        mlps["encoder"],
        mlps["decoder"],
        int(kv["r"]),
        int(kv["n"]),
        float(kv["u_scale"]),
        np.array([float(v) for v in kv["x_center"].split()]),
        np.array([float(v) for v in kv["x_half"].split()]),
    )
