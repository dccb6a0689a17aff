"""Tiny dense networks with exact float64 backprop, plus the adversarial glue.

Everything here is deliberately small: fully connected layers, relu/sigmoid/
identity activations, SGD with momentum and weight decay, and a JSON
checkpoint format. forward() hands back an explicit tape; backward() consumes
it and accumulates parameter gradients, so one network can absorb
contributions from several loss branches before its optimizer step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import seeded_rng

_ACTIVATIONS = ("relu", "sigmoid", "identity")

CHECKPOINT_VERSION = 1

# Probabilities are clamped into [BCE_EPS, 1 - BCE_EPS] before the log, so a
# saturated sigmoid cannot emit inf loss or gradient.
BCE_EPS = 1e-7


@dataclass(frozen=True)
class GrlSpec:
    """Gradient reversal coefficient: forward is identity, backward is -lam*g."""

    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")


def grl(grad: np.ndarray, spec: GrlSpec) -> np.ndarray:
    """Reverse (and scale) a gradient flowing back through the identity map."""
    return -spec.lam * np.asarray(grad, dtype=np.float64)


def bce_loss(p: np.ndarray, d: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the probabilities.

    ``p`` holds predicted probabilities, ``d`` the 0/1 domain targets.
    Returns (loss, dloss_dp) where dloss_dp already carries the 1/n of the
    mean reduction.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if p.shape != d.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {d.shape}")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(d * np.log(pc) + (1.0 - d) * np.log(1.0 - pc))
    grad = (-d / pc + (1.0 - d) / (1.0 - pc)) / p.size
    return float(loss.mean()), grad


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseNet:
    """Fully connected net; weights are (out, in) float64 matrices."""

    def __init__(self, layer_sizes: Sequence[int], activations: Sequence[str], seed: int = 0, key: Sequence[int] = ()):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        acts = list(activations)
        if len(acts) != len(sizes) - 1:
            raise ValueError(
                f"{len(sizes) - 1} layers need {len(sizes) - 1} activations, got {len(acts)}"
            )
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}, expected one of {_ACTIVATIONS}")
        self.layer_sizes = sizes
        self.activations = acts
        rng = seeded_rng(seed, key)
        self.weights = [_glorot(rng, sizes[l + 1], sizes[l]) for l in range(len(acts))]
        self.biases = [np.zeros(sizes[l + 1]) for l in range(len(acts))]
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self.mom_w = [np.zeros_like(w) for w in self.weights]
        self.mom_b = [np.zeros_like(b) for b in self.biases]

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Run a (batch, in_dim) array through every layer.

        Returns (output, tape). The tape holds each layer's input plus the
        final output; hand it to backward() unchanged. A 1-D input is
        treated as a single-row batch and squeezed on the way out.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        tape = [x]
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            if act == "relu":
                h = np.maximum(z, 0.0)
            elif act == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-z))
            else:
                h = z
            tape.append(h)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: List[np.ndarray], upstream_grad: np.ndarray) -> np.ndarray:
        """Backprop upstream_grad through the forward recorded on tape.

        Parameter gradients accumulate into grad_w/grad_b; the return value
        is the gradient w.r.t. the forward input, shaped like a batch.
        """
        if len(tape) != len(self.weights) + 1:
            raise ValueError("tape does not match this network's depth")
        g = np.asarray(upstream_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != tape[-1].shape:
            raise ValueError(f"grad shape {g.shape} does not match output {tape[-1].shape}")
        for l in range(len(self.weights) - 1, -1, -1):
            post = tape[l + 1]
            act = self.activations[l]
            if act == "relu":
                g = g * (post > 0.0)
            elif act == "sigmoid":
                g = g * post * (1.0 - post)
            self.grad_w[l] += g.T @ tape[l]
            self.grad_b[l] += g.sum(axis=0)
            g = g @ self.weights[l]
        return g

    def zero_grads(self):
        for gw in self.grad_w:
            gw[:] = 0.0
        for gb in self.grad_b:
            gb[:] = 0.0

    def scale_grads(self, factor: float):
        for gw in self.grad_w:
            gw *= factor
        for gb in self.grad_b:
            gb *= factor

    def sgd_step(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
        """Momentum SGD on the accumulated gradients, then clear them.

        buf <- momentum * buf + (grad + weight_decay * param)
        param <- param - lr * buf
        """
        for w, gw, mw in zip(self.weights, self.grad_w, self.mom_w):
            mw *= momentum
            mw += gw + weight_decay * w
            w -= lr * mw
        for b, gb, mb in zip(self.biases, self.grad_b, self.mom_b):
            mb *= momentum
            mb += gb + weight_decay * b
            b -= lr * mb
        self.zero_grads()

    def parameters(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def gradients(self) -> List[np.ndarray]:
        return list(self.grad_w) + list(self.grad_b)

    def to_dict(self) -> Dict:
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mom_w": [m.tolist() for m in self.mom_w],
            "mom_b": [m.tolist() for m in self.mom_b],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "DenseNet":
        version = payload.get("checkpoint_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        net = cls(payload["layer_sizes"], payload["activations"])
        net.weights = [np.array(w, dtype=np.float64) for w in payload["weights"]]
        net.biases = [np.array(b, dtype=np.float64) for b in payload["biases"]]
        net.mom_w = [np.array(m, dtype=np.float64) for m in payload["mom_w"]]
        net.mom_b = [np.array(m, dtype=np.float64) for m in payload["mom_b"]]
        net.grad_w = [np.zeros_like(w) for w in net.weights]
        net.grad_b = [np.zeros_like(b) for b in net.biases]
        return net

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "DenseNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
