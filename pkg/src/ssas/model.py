"""Network assemblies: shared encoder plus classification heads.

The selection network pairs the encoder with a domain head (trained normally)
and an emotion head behind gradient reversal; the adversarial network pairs a
freshly initialized encoder with an emotion head (trained normally), a domain
head behind gradient reversal, and a frozen copy of the selection stage's
domain discriminator used only for the discrepancy penalty.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import losses
from . import nn
from .autograd import GrlConfig, Tensor


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dim: int
    feature_dim: int
    num_classes: int
    num_domains: int
    radius: float = 1.0
    noise_variance: float = 0.01
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "feature_dim", "num_classes",
                     "num_domains"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.radius <= 0:
            raise ModelError(f"radius must be positive, got {self.radius}")


def _glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def _init_slr(rng: np.random.Generator, num_classes: int, dim: int, radius: float,
              name: str) -> nn.SlrHead:
    omega = rng.standard_normal((num_classes, dim))
    return nn.SlrHead(omega, np.zeros(num_classes), radius=radius, name=name)


class Encoder:
    """Two linear blocks with normalization, noise injected between them, and
    a final projection onto the radius-r sphere.

    A small constant lift is added after the last rectifier so that a fully
    dead activation pattern (every feature clipped to zero, which extreme
    outlier inputs can produce) still has a well-defined projection instead
    of a zero-norm row; healthy rows are perturbed negligibly.
    """

    PROJECTION_GUARD = 1e-3

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.lin1 = nn.LinearLayer(
            _glorot_uniform(rng, cfg.hidden_dim, cfg.input_dim),
            np.zeros(cfg.hidden_dim), name="enc.lin1",
        )
        self.bn1 = nn.BatchNormLayer(cfg.hidden_dim, name="enc.bn1")
        self.noise = nn.GaussianNoiseLayer(
            cfg.noise_variance, np.random.default_rng(int(rng.integers(2 ** 62)))
        )
        self.lin2 = nn.LinearLayer(
            _glorot_uniform(rng, cfg.feature_dim, cfg.hidden_dim),
            np.zeros(cfg.feature_dim), name="enc.lin2",
        )
        self.bn2 = nn.BatchNormLayer(cfg.feature_dim, name="enc.bn2")
        self.radius = cfg.radius
        self.mode = "train"

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ModelError(f"unknown mode '{mode}'")
        self.mode = mode
        self.bn1.mode = self.bn2.mode = self.noise.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        h = ag.relu(nn.batchnorm_forward(self.bn1, nn.linear_forward(self.lin1, x)))
        h = nn.gaussian_noise_forward(self.noise, h)
        h = ag.relu(nn.batchnorm_forward(self.bn2, nn.linear_forward(self.lin2, h)))
        guard = h.tape.leaf(np.full(h.shape[1], self.PROJECTION_GUARD))
        return nn.sphere_project(ag.add_bias(h, guard), self.radius)

    def parameters(self) -> list[nn.Parameter]:
        return (self.lin1.parameters() + self.bn1.parameters()
                + self.lin2.parameters() + self.bn2.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "encoder.lin1.weight": self.lin1.weight.value,
            "encoder.lin1.bias": self.lin1.bias.value,
            "encoder.bn1.gamma": self.bn1.gamma.value,
            "encoder.bn1.beta": self.bn1.beta.value,
            "encoder.bn1.running_mean": self.bn1.running_mean,
            "encoder.bn1.running_var": self.bn1.running_var,
            "encoder.lin2.weight": self.lin2.weight.value,
            "encoder.lin2.bias": self.lin2.bias.value,
            "encoder.bn2.gamma": self.bn2.gamma.value,
            "encoder.bn2.beta": self.bn2.beta.value,
            "encoder.bn2.running_mean": self.bn2.running_mean,
            "encoder.bn2.running_var": self.bn2.running_var,
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.lin1.weight.value[...] = arrays["encoder.lin1.weight"]
        self.lin1.bias.value[...] = arrays["encoder.lin1.bias"]
        self.bn1.gamma.value[...] = arrays["encoder.bn1.gamma"]
        self.bn1.beta.value[...] = arrays["encoder.bn1.beta"]
        self.bn1.running_mean[...] = arrays["encoder.bn1.running_mean"]
        self.bn1.running_var[...] = arrays["encoder.bn1.running_var"]
        self.lin2.weight.value[...] = arrays["encoder.lin2.weight"]
        self.lin2.bias.value[...] = arrays["encoder.lin2.bias"]
        self.bn2.gamma.value[...] = arrays["encoder.bn2.gamma"]
        self.bn2.beta.value[...] = arrays["encoder.bn2.beta"]
        self.bn2.running_mean[...] = arrays["encoder.bn2.running_mean"]
        self.bn2.running_var[...] = arrays["encoder.bn2.running_var"]


class FrozenSlrHead:
    """Inference-only copy of a spherical softmax head. Holds plain arrays and
    exposes no trainable parameters, so freezing is structural."""

    def __init__(self, omega: np.ndarray, bias: np.ndarray, radius: float):
        self.omega = np.array(omega, dtype=np.float64, copy=True)
        self.bias = np.array(bias, dtype=np.float64, copy=True)
        self.radius = float(radius)

    @classmethod
    def from_head(cls, head: nn.SlrHead) -> "FrozenSlrHead":
        return cls(head.omega.value, head.bias.value, head.radius)

    def predict(self, z_values: np.ndarray) -> np.ndarray:
        nn._check_on_sphere(np.asarray(z_values, dtype=np.float64), self.radius)
        logits = z_values @ self.omega.T + self.bias
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"frozen.omega": self.omega, "frozen.bias": self.bias}


class SsNetwork:
    """Selection-stage assembly: encoder + domain head (L classes) + emotion
    head (K classes) with reversal on the discrepancy and emotion branches."""

    kind = "ss"

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.emotion_head = _init_slr(rng, cfg.num_classes, cfg.feature_dim,
                                      cfg.radius, "emotion")
        self.domain_head = _init_slr(rng, cfg.num_domains, cfg.feature_dim,
                                     cfg.radius, "domain")
        self.grl_mmd = GrlConfig(cfg.grl_lambda)
        self.grl_ecls = GrlConfig(cfg.grl_lambda)

    def set_mode(self, mode: str):
        self.encoder.set_mode(mode)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder.forward(x)

    def predict_emotion(self, features: np.ndarray) -> np.ndarray:
        return _predict_with_head(self, self.emotion_head, features)

    def parameters(self) -> list[nn.Parameter]:
        return (self.encoder.parameters() + self.emotion_head.parameters()
                + self.domain_head.parameters())

    def heads(self) -> list[nn.SlrHead]:
        return [self.emotion_head, self.domain_head]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.state_arrays())
        out["emotion.omega"] = self.emotion_head.omega.value
        out["emotion.bias"] = self.emotion_head.bias.value
        out["domain.omega"] = self.domain_head.omega.value
        out["domain.bias"] = self.domain_head.bias.value
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.encoder.load_state_arrays(arrays)
        self.emotion_head.omega.value[...] = arrays["emotion.omega"]
        self.emotion_head.bias.value[...] = arrays["emotion.bias"]
        self.domain_head.omega.value[...] = arrays["domain.omega"]
        self.domain_head.bias.value[...] = arrays["domain.bias"]


class AsNetwork:
    """Adversarial-stage assembly with a frozen discriminator reference.

    The frozen head starts as a copy of the domain head's own initialization
    and is replaced by the trained selection-stage discriminator via
    :meth:`attach_frozen_head`; it never changes during training.
    """

    kind = "as"

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.emotion_head = _init_slr(rng, cfg.num_classes, cfg.feature_dim,
                                      cfg.radius, "emotion")
        self.domain_head = _init_slr(rng, cfg.num_domains, cfg.feature_dim,
                                     cfg.radius, "domain")
        self.grl_dcls = GrlConfig(cfg.grl_lambda)
        self.frozen_head = FrozenSlrHead.from_head(self.domain_head)

    def attach_frozen_head(self, head):
        if isinstance(head, nn.SlrHead):
            head = FrozenSlrHead.from_head(head)
        if head.omega.shape != self.domain_head.omega.value.shape:
            raise ModelError(
                f"frozen head shape {head.omega.shape} does not match domain head "
                f"{self.domain_head.omega.value.shape}"
            )
        self.frozen_head = head

    def set_mode(self, mode: str):
        self.encoder.set_mode(mode)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder.forward(x)

    def predict_emotion(self, features: np.ndarray) -> np.ndarray:
        return _predict_with_head(self, self.emotion_head, features)

    def parameters(self) -> list[nn.Parameter]:
        return (self.encoder.parameters() + self.emotion_head.parameters()
                + self.domain_head.parameters())

    def heads(self) -> list[nn.SlrHead]:
        return [self.emotion_head, self.domain_head]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.state_arrays())
        out["emotion.omega"] = self.emotion_head.omega.value
        out["emotion.bias"] = self.emotion_head.bias.value
        out["domain.omega"] = self.domain_head.omega.value
        out["domain.bias"] = self.domain_head.bias.value
        out.update(self.frozen_head.state_arrays())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.encoder.load_state_arrays(arrays)
        self.emotion_head.omega.value[...] = arrays["emotion.omega"]
        self.emotion_head.bias.value[...] = arrays["emotion.bias"]
        self.domain_head.omega.value[...] = arrays["domain.omega"]
        self.domain_head.bias.value[...] = arrays["domain.bias"]
        self.frozen_head = FrozenSlrHead(arrays["frozen.omega"], arrays["frozen.bias"],
                                         self.cfg.radius)


def _predict_with_head(net, head, features: np.ndarray) -> np.ndarray:
    """Pure eval-mode pass on a throwaway tape; the training mode and the
    normalization statistics are left untouched."""
    previous = net.encoder.mode
    net.encoder.set_mode("eval")
    try:
        tape = ag.Tape()
        z = net.encode(tape.leaf(np.asarray(features, dtype=np.float64)))
        return head.predict(z.data)
    finally:
        net.encoder.set_mode(previous)


def init_networks(cfg: NetworkConfig, rng: np.random.Generator, kind: str):
    """Build a selection- or adversarial-stage network, fully determined by
    the generator state."""
    if kind == "ss":
        return SsNetwork(cfg, rng)
    if kind == "as":
        return AsNetwork(cfg, rng)
    raise ModelError(f"unknown network kind '{kind}'")


def count_parameters(net) -> int:
    return int(sum(p.value.size for p in net.parameters()))


def ss_forward(net: SsNetwork, batch: losses.DomainBatch, mode: str,
               cfg: losses.LossWeights) -> losses.SsResult:
    net.set_mode(mode)
    return losses.ss_objective(net, batch, cfg)


def as_forward(net: AsNetwork, batch: losses.DomainBatch, mode: str,
               cfg: losses.LossWeights,
               frozen_probs: np.ndarray | None = None) -> losses.AsResult:
    net.set_mode(mode)
    return losses.as_objective(net, batch, cfg, frozen_probs=frozen_probs)


# ---------------------------------------------------------------------------
# Checkpoint container: little-endian binary, bit-exact round trip.
#
#   magic "SSASCKP1" | u32 config_len | config JSON (utf-8, sorted keys)
#   | u32 tensor_count | per tensor:
#       u16 name_len | name utf-8 | u8 ndim | u32 dims... | float64 data (LE)
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SSASCKP1"


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]):
    blob = bytearray()
    blob += _CKPT_MAGIC
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.astype("<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    off = 8
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        arrays[name] = arr.astype(np.float64)
    return config, arrays
