"""Dense feed-forward networks with hand-written backprop.

Three model roles share this machinery: the student classifier, its EMA
teacher (never backpropped, perturbed by dropout/dropconnect at train time),
and the latent encoder/decoder pair. Losses hand their gradient w.r.t. the
final-layer activation (logits for softmax-head nets) to `backward`;
`backward_latent` instead injects a gradient at the last hidden activation
and leaves the output layer untouched.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .numkit import Matrix, Rng, ShapeError, softmax_rows

ACTIVATIONS = ("relu", "identity")
HEADS = ("softmax", "identity")

CHECKPOINT_MAGIC = b"GSSL"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weights: Matrix  # in x out
    bias: Matrix  # 1 x out
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (1, self.weights.shape[1]):
            raise ShapeError(
                f"bias shape {self.bias.shape} inconsistent with weights {self.weights.shape}"
            )

    @property
    def in_width(self) -> int:
        return self.weights.shape[0]

    @property
    def out_width(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    layers: list[DenseLayer]
    output_head: str = "identity"

    def __post_init__(self):
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_width != b.in_width:
                raise ShapeError(f"layer widths do not chain: {a.out_width} -> {b.in_width}")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def latent_width(self) -> int:
        """Width of the last hidden activation (input of the output layer)."""
        return self.layers[-1].in_width

    def widths(self) -> list[int]:
        return [self.layers[0].in_width] + [l.out_width for l in self.layers]

    def arch(self) -> tuple:
        return (tuple(self.widths()), tuple(l.activation for l in self.layers), self.output_head)

    def param_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)


@dataclass
class NoiseMasks:
    """Multiplicative noise for one forward pass (inverted-scale convention).

    dropout[k] multiplies the activation of layer k (hidden layers only, so
    len == n_layers - 1, entries may be None); dropconnect multiplies the
    first layer's weight matrix.
    """

    dropout: list[Matrix | None] = field(default_factory=list)
    dropconnect: Matrix | None = None


@dataclass
class ForwardTrace:
    x: Matrix
    pre_acts: list[Matrix]
    acts: list[Matrix]
    output: Matrix  # after the output head
    latent: Matrix  # activation of the last hidden layer
    masks: NoiseMasks | None = None


@dataclass
class ParamGrads:
    """Per-layer (dW, db); None marks layers excluded from the update."""

    weights: list[Matrix | None]
    biases: list[Matrix | None]
    input_grad: Matrix


def _act(z: Matrix, kind: str) -> Matrix:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(grad_h: Matrix, z: Matrix, kind: str) -> Matrix:
    if kind == "relu":
        return np.where(z > 0.0, grad_h, 0.0)
    return grad_h


def forward(net: Network, x: Matrix, masks: NoiseMasks | None = None) -> ForwardTrace:
    """Run the network; masks absent means inference mode (no noise at all)."""
    if x.ndim != 2 or x.shape[1] != net.in_width:
        raise ShapeError(f"input width {x.shape} != network input {net.in_width}")
    n = len(net.layers)
    pre_acts: list[Matrix] = []
    acts: list[Matrix] = []
    h = x
    for k, layer in enumerate(net.layers):
        w = layer.weights
        if masks is not None and k == 0 and masks.dropconnect is not None:
            w = w * masks.dropconnect
        z = h @ w + layer.bias
        h = _act(z, layer.activation)
        if masks is not None and k < n - 1 and k < len(masks.dropout):
            m = masks.dropout[k]
            if m is not None:
                h = h * m
        pre_acts.append(z)
        acts.append(h)
    latent = acts[-2] if n >= 2 else x
    out = softmax_rows(acts[-1]) if net.output_head == "softmax" else acts[-1]
    return ForwardTrace(x=x, pre_acts=pre_acts, acts=acts, output=out, latent=latent, masks=masks)


def _backward_through(net: Network, trace: ForwardTrace, grad_act: Matrix, top: int) -> ParamGrads:
    """Backprop a gradient given w.r.t. the activation of layer `top` down to
    the input, returning grads for layers 0..top (None above)."""
    n = len(net.layers)
    masks = trace.masks
    gw: list[Matrix | None] = [None] * n
    gb: list[Matrix | None] = [None] * n
    g = grad_act
    for k in range(top, -1, -1):
        layer = net.layers[k]
        if masks is not None and k < n - 1 and k < len(masks.dropout) and masks.dropout[k] is not None:
            g = g * masks.dropout[k]
        g = _act_grad(g, trace.pre_acts[k], layer.activation)
        h_in = trace.x if k == 0 else trace.acts[k - 1]
        gw[k] = h_in.T @ g
        gb[k] = g.sum(axis=0, keepdims=True)
        w = layer.weights
        if masks is not None and k == 0 and masks.dropconnect is not None:
            gw[k] = gw[k] * masks.dropconnect
            w = w * masks.dropconnect
        g = g @ w.T
    return ParamGrads(weights=gw, biases=gb, input_grad=g)


def backward(net: Network, trace: ForwardTrace, grad_out: Matrix) -> ParamGrads:
    """Gradients of a scalar loss given d(loss)/d(final activation).

    For softmax-head networks the caller passes the fused softmax/loss
    gradient w.r.t. logits; the head itself is outside the chain.
    """
    if grad_out.shape != trace.acts[-1].shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output {trace.acts[-1].shape}")
    return _backward_through(net, trace, grad_out, top=len(net.layers) - 1)


def backward_latent(net: Network, trace: ForwardTrace, grad_latent: Matrix) -> ParamGrads:
    """Gradients from a loss on the last hidden activation; output layer frozen."""
    if len(net.layers) < 2:
        raise ShapeError("backward_latent needs at least one hidden layer")
    if grad_latent.shape != trace.latent.shape:
        raise ShapeError(f"grad_latent shape {grad_latent.shape} != latent {trace.latent.shape}")
    return _backward_through(net, trace, grad_latent, top=len(net.layers) - 2)


def dropout_mask(rng: Rng, shape: tuple[int, int], p_drop: float) -> Matrix:
    """Inverted-scale activation mask: entries in {0, 1/(1-p_drop)}."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("p_drop must be in [0, 1)")
    if p_drop == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.bernoulli(shape[0], shape[1], 1.0 - p_drop)
    return keep / (1.0 - p_drop)


def dropconnect_mask(rng: Rng, weight_shape: tuple[int, int], p_drop: float) -> Matrix:
    """Inverted-scale weight mask; same arithmetic as dropout, applied to W."""
    return dropout_mask(rng, weight_shape, p_drop)


def he_uniform(rng: Rng, fan_in: int, fan_out: int) -> Matrix:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(fan_in, fan_out, -limit, limit)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(fan_in, fan_out, -limit, limit)


def build_network(widths: list[int], activations: list[str], output_head: str, rng: Rng) -> Network:
    """He-uniform init for relu layers, Xavier-uniform otherwise; zero bias."""
    if len(activations) != len(widths) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for k, act in enumerate(activations):
        fan_in, fan_out = widths[k], widths[k + 1]
        w = he_uniform(rng, fan_in, fan_out) if act == "relu" else xavier_uniform(rng, fan_in, fan_out)
        layers.append(DenseLayer(weights=w, bias=np.zeros((1, fan_out)), activation=act))
    return Network(layers=layers, output_head=output_head)


def clone_network(net: Network) -> Network:
    return Network(
        layers=[
            DenseLayer(weights=l.weights.copy(), bias=l.bias.copy(), activation=l.activation)
            for l in net.layers
        ],
        output_head=net.output_head,
    )


def param_vector(net: Network) -> np.ndarray:
    """All parameters flattened in layer order (W then b per layer)."""
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()]) for l in net.layers])


def ema_update(secondary: Network, primary: Network, beta: float) -> Network:
    """p_s' = beta * p_s + (1 - beta) * p_p for every parameter."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    if secondary.arch() != primary.arch():
        raise ShapeError("ema_update requires identical architectures")
    layers = []
    for ls, lp in zip(secondary.layers, primary.layers):
        layers.append(
            DenseLayer(
                weights=beta * ls.weights + (1.0 - beta) * lp.weights,
                bias=beta * ls.bias + (1.0 - beta) * lp.bias,
                activation=ls.activation,
            )
        )
    return Network(layers=layers, output_head=secondary.output_head)


@dataclass
class Optimizer:
    """SGD-with-momentum or Adam; state buffers mirror parameter shapes."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    _state: dict = field(default_factory=dict, repr=False)
    _t: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _opt_buffers(opt: Optimizer, key: tuple, shape: tuple) -> dict:
    buf = opt._state.get(key)
    if buf is None:
        if opt.kind == "adam":
            buf = {"m": np.zeros(shape), "v": np.zeros(shape)}
        else:
            buf = {"vel": np.zeros(shape)}
        opt._state[key] = buf
    if buf[next(iter(buf))].shape != shape:
        raise ShapeError(f"optimizer state shape mismatch for {key}")
    return buf


def optimizer_step(opt: Optimizer, net: Network, grads: ParamGrads) -> Network:
    """Apply one update; layers whose grads are None are left untouched."""
    opt._t += 1
    t = opt._t
    lr = opt.learning_rate
    layers = []
    for k, layer in enumerate(net.layers):
        gw, gb = grads.weights[k], grads.biases[k]
        if gw is None:
            layers.append(layer)
            continue
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {k}")
        new_params = []
        for name, p, g in (("w", layer.weights, gw), ("b", layer.bias, gb)):
            buf = _opt_buffers(opt, (k, name), p.shape)
            if opt.kind == "adam":
                buf["m"] = opt.beta1 * buf["m"] + (1.0 - opt.beta1) * g
                buf["v"] = opt.beta2 * buf["v"] + (1.0 - opt.beta2) * g * g
                opt._state[(k, name)] = buf
                m_hat = buf["m"] / (1.0 - opt.beta1**t)
                v_hat = buf["v"] / (1.0 - opt.beta2**t)
                new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + opt.epsilon))
            else:
                buf["vel"] = opt.momentum * buf["vel"] - lr * g
                opt._state[(k, name)] = buf
                new_params.append(p + buf["vel"])
        layers.append(DenseLayer(weights=new_params[0], bias=new_params[1], activation=layer.activation))
    return Network(layers=layers, output_head=net.output_head)


_ACT_CODE = {"identity": 0, "relu": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}
_HEAD_CODE = {"identity": 0, "softmax": 1}
_HEAD_NAME = {v: k for k, v in _HEAD_CODE.items()}


def save_checkpoint(path, nets: dict[str, Network]) -> None:
    """Flat binary checkpoint. Layout (little-endian throughout):

    magic 'GSSL' | u32 version | u32 n_networks, then per network:
    u32 name_len | name utf-8 | u8 head | u32 n_layers |
    per layer (u32 in, u32 out, u8 act) | per layer raw float64 W then b.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(nets)))
    for name, net in nets.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _HEAD_CODE[net.output_head], len(net.layers)))
        for l in net.layers:
            buf.write(struct.pack("<IIB", l.in_width, l.out_width, _ACT_CODE[l.activation]))
        for l in net.layers:
            buf.write(np.ascontiguousarray(l.weights, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> dict[str, Network]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    off = 0

    def take(n):
        nonlocal off
        chunk = view[off : off + n]
        if len(chunk) != n:
            raise ValueError("truncated checkpoint")
        off += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, n_nets = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    nets: dict[str, Network] = {}
    for _ in range(n_nets):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        head_code, n_layers = struct.unpack("<BI", take(5))
        spec = [struct.unpack("<IIB", take(9)) for _ in range(n_layers)]
        layers = []
        for fan_in, fan_out, act_code in spec:
            w = np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out).copy()
            b = np.frombuffer(take(8 * fan_out), dtype="<f8").reshape(1, fan_out).copy()
            layers.append(DenseLayer(weights=w, bias=b, activation=_ACT_NAME[act_code]))
        nets[name] = Network(layers=layers, output_head=_HEAD_NAME[head_code])
    return nets
