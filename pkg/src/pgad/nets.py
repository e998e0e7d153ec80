"""Small MLP encoders and heads with explicit, framework-free gradients.

Everything here is plain numpy in float64.  Each network exposes its
trainable parameters as one flat vector in a fixed documented order
(sub-nets in declared order; within an MLP, per layer: weight matrix in
row-major order, then bias), so optimizers and finite-difference checks
can treat a network as a single point in R^n.

Backward passes consume a single-slot cache written by the most recent
forward pass.  Calling backward twice, or before any forward, raises
UsageError instead of silently reusing stale activations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ProtocolError, ShapeError, UsageError
from .seeding import derive_seed

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input → hidden… → output) and the hidden activation."""

    layer_widths: tuple
    activation: str = "tanh"

    def validate(self) -> None:
        if len(self.layer_widths) < 2:
            raise ConfigError(f"need at least input and output widths, got {self.layer_widths}")
        if any(int(w) < 1 for w in self.layer_widths):
            raise ConfigError(f"all layer widths must be >= 1, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return int(self.layer_widths[0])

    @property
    def out_dim(self) -> int:
        return int(self.layer_widths[-1])


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


class Mlp:
    """Fully connected net; the final layer is affine (no activation)."""

    def __init__(self, spec: MlpSpec, seed: int):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        widths = spec.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            s = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-s, s, size=(fan_out,)))
        self._cache: Optional[dict] = None

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ShapeError(f"expected flat vector of length {self.param_count}, got {flat.shape}")
        offset = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[offset : offset + w.size].reshape(w.shape).copy()
            offset += w.size
            self.biases[i] = flat[offset : offset + b.size].copy()
            offset += b.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-d batch (N, {self.spec.in_dim}), got shape {x.shape}")
        if x.shape[1] != self.spec.in_dim:
            raise ShapeError(f"expected input dim {self.spec.in_dim}, got {x.shape[1]}")
        acts = [x]
        pre = []
        n_layers = len(self.weights)
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == n_layers - 1 else _act(self.spec.activation, z)
            acts.append(h)
        self._cache = {"acts": acts, "pre": pre}
        return h

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (flat parameter gradient, gradient wrt the forward input).

        Consumes the cache from the most recent forward pass.
        """
        if self._cache is None:
            raise UsageError("backward called without a pending forward pass")
        cache, self._cache = self._cache, None
        acts, pre = cache["acts"], cache["pre"]
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != acts[-1].shape:
            raise ShapeError(f"expected upstream grad of shape {acts[-1].shape}, got {grad_out.shape}")

        n_layers = len(self.weights)
        grads_w = [None] * n_layers
        grads_b = [None] * n_layers
        delta = grad_out
        for i in range(n_layers - 1, -1, -1):
            if i != n_layers - 1:
                delta = delta * _act_grad(self.spec.activation, pre[i])
            grads_w[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i]

        chunks = []
        for gw, gb in zip(grads_w, grads_b):
            chunks.append(gw.ravel())
            chunks.append(gb.ravel())
        return np.concatenate(chunks), delta


def _as_batch(x: np.ndarray, dim: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        single = True
    elif x.ndim == 2:
        single = False
    else:
        raise ShapeError(f"{name}: expected 1-d or 2-d input, got shape {x.shape}")
    if x.shape[1] != dim:
        raise ShapeError(f"{name}: expected feature dim {dim}, got {x.shape[1]}")
    return x, single


class TeacherNet:
    """Two-modality classifier: per-modality encoders, fusion MLP, linear head."""

    def __init__(self, enc_a: Mlp, enc_b: Mlp, fusion: Mlp, head: Mlp):
        feat = enc_a.spec.out_dim
        if enc_b.spec.out_dim != feat:
            raise ConfigError(
                f"encoder output dims differ: enc_a {feat} vs enc_b {enc_b.spec.out_dim}"
            )
        if fusion.spec.in_dim != 2 * feat:
            raise ConfigError(f"fusion must take {2 * feat} inputs, got {fusion.spec.in_dim}")
        if fusion.spec.out_dim != feat:
            raise ConfigError(
                f"fusion output dim {fusion.spec.out_dim} must equal encoder dim {feat}"
            )
        if head.spec.in_dim != feat:
            raise ConfigError(f"head must take {feat} inputs, got {head.spec.in_dim}")
        self.enc_a = enc_a
        self.enc_b = enc_b
        self.fusion = fusion
        self.head = head
        self._parts = (enc_a, enc_b, fusion, head)

    @classmethod
    def create(
        cls,
        dim_a: int,
        dim_b: int,
        num_classes: int,
        feat_dim: int = 16,
        hidden_width: int = 32,
        activation: str = "tanh",
        seed: int = 0,
    ) -> "TeacherNet":
        enc_a = Mlp(MlpSpec((dim_a, hidden_width, feat_dim), activation), derive_seed(seed, "enc_a"))
        enc_b = Mlp(MlpSpec((dim_b, hidden_width, feat_dim), activation), derive_seed(seed, "enc_b"))
        fusion = Mlp(MlpSpec((2 * feat_dim, feat_dim), activation), derive_seed(seed, "fusion"))
        head = Mlp(MlpSpec((feat_dim, num_classes), activation), derive_seed(seed, "head"))
        return cls(enc_a, enc_b, fusion, head)

    @property
    def feat_dim(self) -> int:
        return self.enc_a.spec.out_dim

    @property
    def num_classes(self) -> int:
        return self.head.spec.out_dim

    @property
    def param_count(self) -> int:
        return sum(p.param_count for p in self._parts)

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.get_params() for p in self._parts])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ShapeError(f"expected flat vector of length {self.param_count}, got {flat.shape}")
        offset = 0
        for p in self._parts:
            p.set_params(flat[offset : offset + p.param_count])
            offset += p.param_count


class StudentNet:
    """Single-modality classifier: modality-A encoder plus linear head."""

    def __init__(self, enc_a: Mlp, head: Mlp):
        feat = enc_a.spec.out_dim
        if head.spec.in_dim != feat:
            raise ConfigError(f"head must take {feat} inputs, got {head.spec.in_dim}")
        self.enc_a = enc_a
        self.head = head
        self._parts = (enc_a, head)

    @classmethod
    def create(
        cls,
        dim_a: int,
        num_classes: int,
        feat_dim: int = 16,
        hidden_width: int = 32,
        activation: str = "tanh",
        seed: int = 0,
    ) -> "StudentNet":
        enc_a = Mlp(MlpSpec((dim_a, hidden_width, feat_dim), activation), derive_seed(seed, "enc_a"))
        head = Mlp(MlpSpec((feat_dim, num_classes), activation), derive_seed(seed, "head"))
        return cls(enc_a, head)

    @property
    def feat_dim(self) -> int:
        return self.enc_a.spec.out_dim

    @property
    def num_classes(self) -> int:
        return self.head.spec.out_dim

    @property
    def param_count(self) -> int:
        return sum(p.param_count for p in self._parts)

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.get_params() for p in self._parts])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ShapeError(f"expected flat vector of length {self.param_count}, got {flat.shape}")
        offset = 0
        for p in self._parts:
            p.set_params(flat[offset : offset + p.param_count])
            offset += p.param_count


def teacher_forward(net: TeacherNet, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (fused features, logits) for a batch (or single pair) of inputs."""
    a2, single_a = _as_batch(a, net.enc_a.spec.in_dim, "modality a")
    b2, single_b = _as_batch(b, net.enc_b.spec.in_dim, "modality b")
    if a2.shape[0] != b2.shape[0]:
        raise ShapeError(f"batch sizes differ: a has {a2.shape[0]}, b has {b2.shape[0]}")
    ha = net.enc_a.forward(a2)
    hb = net.enc_b.forward(b2)
    fused = net.fusion.forward(np.concatenate([ha, hb], axis=1))
    logits = net.head.forward(fused)
    if single_a and single_b:
        return fused[0], logits[0]
    return fused, logits


def teacher_backward(net: TeacherNet, grad_fused: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given upstream grads at the fused feature and logits.

    Both upstream grads refer to the same (most recent) teacher_forward batch;
    passing zeros for one of them is the way to say "no signal on this output".
    """
    g_head, g_fused_from_head = net.head.backward(np.atleast_2d(grad_logits))
    total_fused = np.atleast_2d(grad_fused) + g_fused_from_head
    g_fusion, g_concat = net.fusion.backward(total_fused)
    feat = net.feat_dim
    g_enc_a, _ = net.enc_a.backward(g_concat[:, :feat])
    g_enc_b, _ = net.enc_b.backward(g_concat[:, feat:])
    return np.concatenate([g_enc_a, g_enc_b, g_fusion, g_head])


def student_forward(net: StudentNet, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (features, logits) for a batch (or single vector) of modality-A inputs."""
    a2, single = _as_batch(a, net.enc_a.spec.in_dim, "modality a")
    feat = net.enc_a.forward(a2)
    logits = net.head.forward(feat)
    if single:
        return feat[0], logits[0]
    return feat, logits


def student_backward(net: StudentNet, grad_feat: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given upstream grads at the feature and logits."""
    g_head, g_feat_from_head = net.head.backward(np.atleast_2d(grad_logits))
    total_feat = np.atleast_2d(grad_feat) + g_feat_from_head
    g_enc, _ = net.enc_a.backward(total_feat)
    return np.concatenate([g_enc, g_head])


_NET_KINDS = {"teacher": TeacherNet, "student": StudentNet}
_PART_NAMES = {"teacher": ("enc_a", "enc_b", "fusion", "head"), "student": ("enc_a", "head")}


def save_checkpoint(net, path) -> None:
    """Write a text checkpoint: JSON header line, then one float64 repr per line."""
    if isinstance(net, TeacherNet):
        kind = "teacher"
    elif isinstance(net, StudentNet):
        kind = "student"
    else:
        raise UsageError(f"cannot checkpoint object of type {type(net).__name__}")
    header = {
        "kind": kind,
        "specs": {
            name: {
                "layer_widths": list(getattr(net, name).spec.layer_widths),
                "activation": getattr(net, name).spec.activation,
            }
            for name in _PART_NAMES[kind]
        },
    }
    flat = net.get_params()
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for v in flat:
            fh.write(repr(float(v)) + "\n")


def load_checkpoint(path):
    """Rebuild a TeacherNet or StudentNet from a save_checkpoint file."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        values = [float(line) for line in fh if line.strip()]
    kind = header.get("kind")
    if kind not in _NET_KINDS:
        raise ProtocolError(f"unknown checkpoint kind {kind!r}")
    parts = {}
    for name in _PART_NAMES[kind]:
        spec_info = header["specs"][name]
        spec = MlpSpec(tuple(spec_info["layer_widths"]), spec_info["activation"])
        parts[name] = Mlp(spec, seed=0)
    net = _NET_KINDS[kind](**parts)
    flat = np.array(values, dtype=np.float64)
    if flat.shape != (net.param_count,):
        raise ProtocolError(
            f"checkpoint holds {flat.size} values but the architecture needs {net.param_count}"
        )
    net.set_params(flat)
    return net
