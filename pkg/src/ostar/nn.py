"""Dense-network engine with exact manual backpropagation and Adam.

All networks are plain MLPs held as numpy float64 arrays. Forward passes
record every pre- and post-activation so that backward passes return exact
gradients for the parameters and for the batch inputs. Residual maps stack
two-layer blocks applied as z <- z + h(z), which makes the map the identity
whenever every block outputs zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import (
    CheckpointVersionError,
    InvalidLabelError,
    InvalidSpecError,
    InvalidWeightError,
    ShapeError,
)

CHECKPOINT_VERSION = "ostar-ckpt-1"

_TAGS = ("encoder", "classifier", "residual-block", "critic")
_ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseNet:
    """Parameters of one feed-forward network.

    weights[l] has shape (d_in, d_out) and biases[l] shape (d_out,).
    activations[l] is "relu" or "identity"; heads emit logits, the softmax
    lives in the loss functions.
    """

    weights: list
    biases: list
    activations: list
    tag: str = "classifier"

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise InvalidSpecError(f"unknown architecture tag {self.tag!r}")
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise InvalidSpecError("weights, biases and activations must align")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise InvalidSpecError(f"unknown activation {act!r}")
        for l in range(len(self.weights) - 1):
            if self.weights[l].shape[1] != self.weights[l + 1].shape[0]:
                raise InvalidSpecError(
                    f"layer {l} output dim {self.weights[l].shape[1]} does not feed "
                    f"layer {l + 1} input dim {self.weights[l + 1].shape[0]}"
                )
        if self.tag == "critic" and self.weights[-1].shape[1] != 1:
            raise InvalidSpecError("critic networks must have scalar output")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            self.tag,
        )


@dataclass
class GradientSet:
    """Per-parameter gradients, shape-congruent with a DenseNet."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "GradientSet":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def add_(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for w, ow in zip(self.weights, other.weights):
            w += scale * ow
        for b, ob in zip(self.biases, other.biases):
            b += scale * ob
        return self


@dataclass
class DenseActivations:
    """Everything forward() computed, kept for the backward pass."""

    inputs: np.ndarray
    pre: list
    post: list

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def init_dense(dims, scheme: str, gain: float, seed, tag: str = "classifier") -> DenseNet:
    """Build a DenseNet with relu hidden layers and an identity head.

    scheme "normal" draws weights N(0, gain^2); "orthogonal" takes the Q factor
    of a seeded Gaussian matrix (sign-fixed so R has positive diagonal) scaled
    by gain. Biases start at zero.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise InvalidSpecError("a network needs at least one layer")
    if any(d <= 0 for d in dims):
        raise InvalidSpecError(f"layer dimensions must be positive, got {dims}")
    if not gain > 0:
        raise InvalidSpecError("init gain must be strictly positive")
    if scheme not in ("normal", "orthogonal"):
        raise InvalidSpecError(f"unknown init scheme {scheme!r}")

    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "init", tag)
    weights, biases, activations = [], [], []
    for l, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if scheme == "normal":
            w = gain * rng.normal(gen, (d_in, d_out))
        else:
            w = gain * _orthogonal(gen, d_in, d_out)
        weights.append(w)
        biases.append(np.zeros(d_out))
        activations.append("identity" if l == len(dims) - 2 else "relu")
    return DenseNet(weights, biases, activations, tag)


def _orthogonal(gen, d_in: int, d_out: int) -> np.ndarray:
    # QR of the taller orientation so the result has orthonormal rows or columns.
    transpose = d_in < d_out
    rows, cols = (d_out, d_in) if transpose else (d_in, d_out)
    g = rng.normal(gen, (rows, cols))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q.T if transpose else q


def dense_forward(net: DenseNet, batch: np.ndarray) -> DenseActivations:
    """Run the net on a (n, d_in) batch, recording every intermediate value."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch of shape {batch.shape} does not match input dim {net.input_dim}"
        )
    pre, post = [], []
    x = batch
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = x @ w + b
        pre.append(z)
        x = np.maximum(z, 0.0) if act == "relu" else z
        post.append(x)
    return DenseActivations(batch, pre, post)


def dense_backward(net: DenseNet, acts: DenseActivations, output_grad: np.ndarray):
    """Exact gradients for a scalar loss whose gradient at the output is given.

    Returns (GradientSet, input_grad). `acts` must come from dense_forward on
    this net and the same batch.
    """
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != acts.post[-1].shape:
        raise ShapeError(
            f"output gradient shape {output_grad.shape} does not match "
            f"activations {acts.post[-1].shape}"
        )
    grads = GradientSet([None] * net.n_layers, [None] * net.n_layers)
    delta = output_grad
    for l in range(net.n_layers - 1, -1, -1):
        if net.activations[l] == "relu":
            gamma = delta * (acts.pre[l] > 0)
        else:
            gamma = delta
        upstream = acts.post[l - 1] if l > 0 else acts.inputs
        if upstream.shape[0] != gamma.shape[0]:
            raise ShapeError("stale activations: batch sizes disagree")
        grads.weights[l] = upstream.T @ gamma
        grads.biases[l] = gamma.sum(axis=0)
        delta = gamma @ net.weights[l].T
    return grads, delta


def scalar_input_gradients(net: DenseNet, acts: DenseActivations):
    """Per-sample input gradient of a scalar-output net, plus the backward chain.

    Returns (G, gammas) where G[i] = d out_i / d input_i and gammas[l] is the
    gradient at pre-activation l, both for unit output gradient. The chain is
    what the gradient-penalty second-order pass differentiates through.
    """
    if net.output_dim != 1:
        raise ShapeError("input-gradient chain requires a scalar-output net")
    n = acts.inputs.shape[0]
    gammas = [None] * net.n_layers
    delta = np.ones((n, 1))
    for l in range(net.n_layers - 1, -1, -1):
        gamma = delta * (acts.pre[l] > 0) if net.activations[l] == "relu" else delta
        gammas[l] = gamma
        delta = gamma @ net.weights[l].T
    return delta, gammas


@dataclass
class ResidualMap:
    """Residual transport map: z <- z + h_b(z) through B two-layer blocks."""

    blocks: list

    def __post_init__(self):
        if not self.blocks:
            raise InvalidSpecError("a residual map needs at least one block")
        d = self.blocks[0].input_dim
        for b in self.blocks:
            if b.input_dim != d or b.output_dim != d:
                raise InvalidSpecError("residual blocks must map dimension d to d")

    @property
    def dim(self) -> int:
        return self.blocks[0].input_dim

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def copy(self) -> "ResidualMap":
        return ResidualMap([b.copy() for b in self.blocks])


@dataclass
class ResidualActivations:
    block_inputs: list   # z_0 .. z_B, block_inputs[-1] is the map output
    block_acts: list     # DenseActivations per block
    residuals: list      # h_b(z_b) per block

    @property
    def output(self) -> np.ndarray:
        return self.block_inputs[-1]


def init_residual_map(dim: int, hidden: int, n_blocks: int, scheme: str, gain: float,
                      seed, zero_last_layer: bool = False) -> ResidualMap:
    """Residual map of n_blocks two-layer relu blocks, each dim -> hidden -> dim.

    zero_last_layer zeroes every block's output layer so the map starts as the
    exact identity.
    """
    if n_blocks < 1:
        raise InvalidSpecError("block count must be >= 1")
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "init", "residual-map")
    blocks = []
    for _ in range(n_blocks):
        block = init_dense([dim, hidden, dim], scheme, gain, gen, tag="residual-block")
        if zero_last_layer:
            block.weights[-1][:] = 0.0
            block.biases[-1][:] = 0.0
        blocks.append(block)
    return ResidualMap(blocks)


def residual_forward(rmap: ResidualMap, batch: np.ndarray) -> ResidualActivations:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != rmap.dim:
        raise ShapeError(f"batch of shape {batch.shape} does not match map dim {rmap.dim}")
    z = batch
    block_inputs, block_acts, residuals = [z], [], []
    for block in rmap.blocks:
        acts = dense_forward(block, z)
        block_acts.append(acts)
        residuals.append(acts.output)
        z = z + acts.output
        block_inputs.append(z)
    return ResidualActivations(block_inputs, block_acts, residuals)


def residual_backward(rmap: ResidualMap, acts: ResidualActivations, output_grad,
                      residual_grads=None):
    """Backward through the residual composition.

    output_grad is dL/d(map output); residual_grads, when given, adds a direct
    gradient dL/d h_b(z_b) per block (used by the dynamic transport cost).
    Returns (list of per-block GradientSets, input_grad).
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != acts.output.shape:
        raise ShapeError("output gradient does not match map output shape")
    block_grads = [None] * rmap.n_blocks
    for b in range(rmap.n_blocks - 1, -1, -1):
        r_grad = g if residual_grads is None else g + residual_grads[b]
        grads, dz = dense_backward(rmap.blocks[b], acts.block_acts[b], r_grad)
        block_grads[b] = grads
        g = g + dz
    return block_grads, g


@dataclass
class AdamState:
    """Adam accumulators for one DenseNet."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(net: DenseNet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in net.weights],
        [np.zeros_like(w) for w in net.weights],
        [np.zeros_like(b) for b in net.biases],
        [np.zeros_like(b) for b in net.biases],
        0, lr, beta1, beta2, eps,
    )


def adam_step(net: DenseNet, grads: GradientSet, state: AdamState) -> None:
    """Standard Adam update, in place on net and state."""
    if len(grads.weights) != net.n_layers:
        raise ShapeError("gradient set does not match the network")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for l in range(net.n_layers):
        for param, grad, m, v in (
            (net.weights[l], grads.weights[l], state.m_w[l], state.v_w[l]),
            (net.biases[l], grads.biases[l], state.m_b[l], state.v_b[l]),
        ):
            if grad.shape != param.shape:
                raise ShapeError("gradient shape does not match parameter shape")
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            param -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class ResidualAdam:
    """Adam over every block of a residual map."""

    def __init__(self, rmap: ResidualMap, lr: float, **kwargs):
        self.states = [adam_init(b, lr, **kwargs) for b in rmap.blocks]

    def step(self, rmap: ResidualMap, block_grads) -> None:
        for block, grads, state in zip(rmap.blocks, block_grads, self.states):
            adam_step(block, grads, state)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights=None):
    """Weighted mean cross-entropy and its gradient at the logits.

    loss = (1/n) sum_i w_i * CE(softmax(logits_i), y_i). weights default to 1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("labels must be one integer per row of logits")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise InvalidLabelError(f"labels must lie in [0, {k})")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ShapeError("weights must be one scalar per sample")
    if (weights < 0).any():
        raise InvalidWeightError("per-sample weights must be nonnegative")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    per_sample = log_z - shifted[np.arange(n), labels]
    loss = float(np.mean(weights * per_sample))

    probs = softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    grad = probs * (weights / n)[:, None]
    return loss, grad


def _net_record(net: DenseNet) -> dict:
    return {
        "kind": "dense",
        "tag": net.tag,
        "activations": list(net.activations),
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel(order="C").tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def _net_from_record(rec: dict) -> DenseNet:
    weights, biases = [], []
    for layer in rec["layers"]:
        shape = tuple(layer["shape"])
        weights.append(np.array(layer["weight"], dtype=np.float64).reshape(shape))
        biases.append(np.array(layer["bias"], dtype=np.float64))
    return DenseNet(weights, biases, list(rec["activations"]), rec["tag"])


def _map_record(rmap: ResidualMap) -> dict:
    return {"kind": "residual", "blocks": [_net_record(b) for b in rmap.blocks]}


def save_checkpoint(path, components: dict, extra: dict | None = None) -> None:
    """Write nets (DenseNet or ResidualMap keyed by role) plus metadata as JSON."""
    record = {"version": CHECKPOINT_VERSION, "nets": {}, "extra": extra or {}}
    for name, net in components.items():
        record["nets"][name] = _map_record(net) if isinstance(net, ResidualMap) else _net_record(net)
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path):
    """Read a checkpoint; returns (components, extra). Rejects unknown versions."""
    record = json.loads(Path(path).read_text())
    version = record.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r} is not {CHECKPOINT_VERSION!r}"
        )
    components = {}
    for name, rec in record["nets"].items():
        if rec["kind"] == "residual":
            components[name] = ResidualMap([_net_from_record(b) for b in rec["blocks"]])
        else:
            components[name] = _net_from_record(rec)
    return components, record.get("extra", {})
