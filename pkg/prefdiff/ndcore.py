#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Dense feed-forward network with hand-written gradients

The noise predictor of the planner is a plain MLP with tanh hidden layers and a linear
output layer. Gradients are computed by an explicit backward pass over this fixed
topology, no general autodiff is involved.

"""

__author__ = "prefdiff developers"
__date__ = "2024-09-30"


import json
import logging
import types
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, DivergenceError


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "prefdiff.checkpoint"
CHECKPOINT_VERSION = 2


@dataclass
class DenseNet:
    """Weights of a feed-forward network

    Layer ``l`` maps ``x @ weights[l] + biases[l]``, hidden layers apply tanh, the
    output layer is the identity.

    Attributes:
        layer_sizes (list[int]): Widths from input to output, at least 2 entries
        weights (list[np.ndarray]): Matrices of shape (layer_sizes[l], layer_sizes[l+1])
        biases (list[np.ndarray]): Vectors of shape (layer_sizes[l+1],)
    """

    layer_sizes: list
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"Need at least 2 positive layer sizes, got {self.layer_sizes}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError(f"Expected {n} weight matrices and bias vectors")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if np.shape(w) != shape or np.shape(b) != shape[1:]:
                raise ValueError(
                    f"Layer {l}: expected weight {shape} and bias {shape[1:]}, "
                    f"got {np.shape(w)} and {np.shape(b)}"
                )

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def parameters(self):
        """Return all parameter arrays (weights first, then biases)"""
        return [*self.weights, *self.biases]

    def copy(self):
        """Return a deep copy"""
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


@dataclass
class Gradients:
    """Partial derivatives of a scalar loss, shape-congruent with a :class:`DenseNet`"""

    weights: list = field(repr=False)
    biases: list = field(repr=False)

    @classmethod
    def zeros_like(cls, net):
        return cls(
            [np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases]
        )

    def arrays(self):
        return [*self.weights, *self.biases]

    def __add__(self, other):
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, factor):
        return Gradients([factor * w for w in self.weights], [factor * b for b in self.biases])

    def flat(self):
        """Concatenate all entries into one vector (same order as :func:`flat_parameters`)"""
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_net(layer_sizes, rng):
    """Create a network with weights uniform in ±1/sqrt(fan_in) and zero biases

    Args:
        layer_sizes (list[int]): Widths from input to output
        rng (np.random.Generator): Random generator

    Returns:
        DenseNet: The initialized network
    """
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return DenseNet(list(layer_sizes), weights, biases)


def flat_parameters(net):
    """Concatenate all parameters into one vector"""
    return np.concatenate([p.ravel() for p in net.parameters()])


def set_flat_parameters(net, flat):
    """Return a copy of the network with parameters taken from a flat vector"""
    net = net.copy()
    offset = 0
    for p in net.parameters():
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != len(flat):
        raise ValueError(f"Expected {offset} parameters, got {len(flat)}")
    return net


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (net.n_in,) or x.ndim > 2:
        raise ValueError(
            f"Network expects input of length {net.n_in}, got array of shape {x.shape}"
        )
    return x


def _activations(net, x):
    """Forward pass keeping the post-activation of every layer"""
    acts = [x]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w + b
        acts.append(z if l == last else np.tanh(z))
    return acts


def forward(net, x):
    """Evaluate the network

    Args:
        net (DenseNet): The network
        x (np.ndarray): Input vector of length ``layer_sizes[0]``, or a batch of them (B, n_in)

    Returns:
        np.ndarray: Output vector (or batch) of length ``layer_sizes[-1]``

    Raises:
        ValueError: On dimension mismatch
    """
    return _activations(net, _check_input(net, x))[-1]


def backward(net, x, output_grad):
    """Gradient of a loss with respect to the network parameters

    Args:
        net (DenseNet): The network
        x (np.ndarray): Input vector or batch (B, n_in)
        output_grad (np.ndarray): dLoss/dOutput, same leading shape as ``x``.
            For a batch, the gradients of all samples are summed.

    Returns:
        Gradients: dLoss/dParameters

    Raises:
        ValueError: On shape mismatch
    """
    x = _check_input(net, x)
    g = np.asarray(output_grad, dtype=float)
    if g.shape != x.shape[:-1] + (net.n_out,):
        raise ValueError(
            f"Output gradient of shape {g.shape} does not match output shape "
            f"{x.shape[:-1] + (net.n_out,)}"
        )
    acts = _activations(net, x)
    batched = x.ndim == 2
    grad_w, grad_b = [None] * len(net.weights), [None] * len(net.biases)
    for l in reversed(range(len(net.weights))):
        a = acts[l]
        grad_w[l] = a.T @ g if batched else np.outer(a, g)
        grad_b[l] = g.sum(axis=0) if batched else g.copy()
        if l > 0:
            # through the tanh of the previous layer
            g = (g @ net.weights[l].T) * (1 - acts[l] ** 2)
    return Gradients(grad_w, grad_b)


def timestep_embed(k, dim, *, base=10000.0):
    """Sinusoidal embedding of a diffusion step index

    Layout is ``[sin(k f_0), ..., sin(k f_{n-1}), cos(k f_0), ..., cos(k f_{n-1})]`` with
    ``n = dim/2`` and ``f_i = base^(-i/n)``.

    Args:
        k (int | np.ndarray): Diffusion step index or array of indices
        dim (int): Embedding width, even
        base (float): Frequency base

    Returns:
        np.ndarray: Shape (dim,) or (len(k), dim)

    Raises:
        ValueError: if dim is not even and positive
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"Embedding width must be even and positive, got dim={dim}")
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    angles = np.multiply.outer(np.asarray(k, dtype=float), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class Adam:
    """Adam optimizer updating a :class:`DenseNet` in place

    Args:
        net (DenseNet): The network to update (the single writer of its parameters)
        learning_rate (float): Step size
        beta1 (float): First moment decay
        beta2 (float): Second moment decay
        eps (float): Denominator offset
    """

    def __init__(self, net, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p) for p in net.parameters()]
        self._v = [np.zeros_like(p) for p in net.parameters()]

    def step(self, grads):
        """Apply one update

        Args:
            grads (Gradients): Gradients of the loss to minimize

        Raises:
            DivergenceError: if the update produces non-finite parameters
        """
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.net.parameters(), grads.arrays(), self._m, self._v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g**2
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        if not self.net.is_finite():
            raise DivergenceError(f"Non-finite parameters after optimizer step {self.t}")


def _crc(doc):
    return f"{zlib.crc32(json.dumps(doc, sort_keys=True).encode()):08x}"


def save_checkpoint(net, path, meta=None):
    """Write network parameters to a JSON checkpoint

    Floats are written with their shortest round-trip representation,
    so loading reproduces every 64-bit value exactly. A CRC32 of the document
    guards against corrupted files.

    Args:
        net (DenseNet): The network
        path (str | Path): Output file
        meta (dict | None): Additional JSON-serializable information (architecture, fingerprint)
    """
    doc = dict(
        format=CHECKPOINT_FORMAT,
        version=CHECKPOINT_VERSION,
        layer_sizes=net.layer_sizes,
        weights=[w.ravel().tolist() for w in net.weights],
        biases=[b.tolist() for b in net.biases],
        meta=meta or {},
    )
    doc["crc32"] = _crc(doc)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
    logger.debug("Saved checkpoint %s (%d parameters)", path, net.n_parameters())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`

    Args:
        path (str | Path): Checkpoint file

    Returns:
        tuple[DenseNet, dict]: The network and the meta information

    Raises:
        ArtifactError: On unknown format or version, or checksum mismatch
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Checkpoint {path} is not valid JSON: {e}") from e
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(
            f"Checkpoint {path} has format {doc.get('format')!r} version {doc.get('version')!r}, "
            f"expected {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}"
        )
    if doc.pop("crc32", None) != _crc(doc):
        raise ArtifactError(f"Checkpoint {path}: checksum mismatch, the file is corrupted")
    sizes = doc["layer_sizes"]
    weights = [
        np.array(w, dtype=float).reshape(n_in, n_out)
        for w, n_in, n_out in zip(doc["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.array(b, dtype=float) for b in doc["biases"]]
    return DenseNet(sizes, weights, biases), doc["meta"]


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
