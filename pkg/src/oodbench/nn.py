"""Small convolutional classifier with the feature/logit normalization variants."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NORM_EPS, Parameter, Tensor

METHODS = ("baseline", "t2fnorm", "logitnorm", "feature_penalty")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple = (1, 16, 16)
    channels: tuple = (16, 32)
    kernel_size: int = 3
    stride: int = 2
    num_classes: int = 4
    method: str = "baseline"
    tau: float = 0.1
    tau_logit: float = 0.04
    p_norm: int = 2
    normalize_after_block: Optional[int] = None  # None means the final block
    penalty_weight: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if not self.channels:
            raise ValueError("at least one conv block is required")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.tau > 0 or not self.tau_logit > 0:
            raise ValueError("temperatures must be positive")
        if self.p_norm not in (1, 2, 3, 4):
            raise ValueError(f"p_norm must be in 1..4, got {self.p_norm}")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be non-negative")
        if self.normalize_after_block is not None and not 1 <= self.normalize_after_block <= len(self.channels):
            raise ValueError(
                f"normalize_after_block must be in 1..{len(self.channels)}, got {self.normalize_after_block}"
            )

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def norm_block(self) -> int:
        return self.n_blocks if self.normalize_after_block is None else self.normalize_after_block

    @property
    def normalizes_final_feature(self) -> bool:
        return self.method == "t2fnorm" and self.norm_block == self.n_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        return d


@dataclass
class ModelState:
    spec: ModelSpec
    params: list
    epoch: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    def __getitem__(self, name: str) -> Tensor:
        for p in self.params:
            if p.name == name:
                return p.value
        raise KeyError(name)

    @property
    def fc_weight(self) -> Tensor:
        return self["fc.weight"]

    @property
    def fc_bias(self) -> Tensor:
        return self["fc.bias"]

    def zero_grad(self) -> None:
        for p in self.params:
            p.value.grad = None


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Uniform ±sqrt(6/fan_in) weights, zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    c_in = spec.input_shape[0]
    k = spec.kernel_size
    for i, c_out in enumerate(spec.channels, start=1):
        bound = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        params.append(Parameter(f"conv{i}.weight", Tensor(w), "conv-kernel"))
        params.append(Parameter(f"conv{i}.bias", Tensor(np.zeros(c_out)), "bias"))
        c_in = c_out
    bound = np.sqrt(6.0 / spec.feature_dim)
    w = rng.uniform(-bound, bound, size=(spec.num_classes, spec.feature_dim))
    params.append(Parameter("fc.weight", Tensor(w), "fc-weight"))
    params.append(Parameter("fc.bias", Tensor(np.zeros(spec.num_classes)), "fc-bias"))
    return ModelState(spec=spec, params=params)


def _as_input(m: ModelState, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != m.spec.input_shape:
        raise ValueError(f"input shape {x.shape} does not match N×{m.spec.input_shape}")
    return x


def _row_normalize(h: Tensor, tau: float, p: int) -> Tensor:
    norm = T.lp_norm(h, p, axis=1, keepdims=True)
    return T.div(h, T.scale(norm + NORM_EPS, tau))


def feature_normalize(h_star: Tensor, tau: float, p: int = 2) -> Tensor:
    """Project each row onto the Lp sphere of radius 1/tau."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    h_star = h_star if isinstance(h_star, Tensor) else Tensor(h_star)
    return _row_normalize(h_star, tau, p)


def extract_feature(m: ModelState, x, normalize: bool = True) -> Tensor:
    """Post-ReLU, globally pooled output of the last conv block (N×D).

    With t2fnorm placed after an intermediate block, that block's activations
    are divided by tau times the norm of their pooled vector before moving on;
    ``normalize=False`` keeps the division by tau and drops the norm.
    """
    spec = m.spec
    a = _as_input(m, x)
    pad = spec.kernel_size // 2
    inner = spec.method == "t2fnorm" and spec.norm_block < spec.n_blocks
    for i in range(1, spec.n_blocks + 1):
        a = T.conv2d(a, m[f"conv{i}.weight"], stride=spec.stride, padding=pad)
        a = T.relu(a + T.reshape(m[f"conv{i}.bias"], (1, -1, 1, 1)))
        if inner and i == spec.norm_block:
            if normalize:
                norm = T.lp_norm(T.global_avg_pool(a), spec.p_norm, axis=1, keepdims=True)
                a = T.div(a, T.reshape(T.scale(norm + NORM_EPS, spec.tau), (-1, 1, 1, 1)))
            else:
                a = T.scale(a, 1.0 / spec.tau)
    return T.global_avg_pool(a)


def fc(m: ModelState, h: Tensor) -> Tensor:
    return T.matmul(h, T.transpose(m.fc_weight)) + m.fc_bias


def _train_parts(m: ModelState, x) -> tuple:
    spec = m.spec
    h_star = extract_feature(m, x, normalize=True)
    h = feature_normalize(h_star, spec.tau, spec.p_norm) if spec.normalizes_final_feature else h_star
    z = fc(m, h)
    if spec.method == "logitnorm":
        z = T.div(z, T.scale(T.lp_norm(z, 2, axis=1, keepdims=True) + NORM_EPS, spec.tau_logit))
    return z, h_star


def forward_train(m: ModelState, x) -> Tensor:
    """Logits along the training/inference path of the model's method."""
    return _train_parts(m, x)[0]


def forward_score(m: ModelState, x, normalize_at_scoring: bool = False) -> tuple:
    """Return ``(logits, h_star, h_scaled)`` for OOD scoring.

    For t2fnorm the feature is only divided by tau; the norm division used in
    training is skipped. ``normalize_at_scoring`` reinstates it (ablation).
    Methods without a feature temperature use tau = 1 for that ablation.
    """
    spec = m.spec
    if spec.method == "t2fnorm" and not spec.normalizes_final_feature:
        h_star = extract_feature(m, x, normalize=normalize_at_scoring)
        h_scaled = h_star
    else:
        h_star = extract_feature(m, x, normalize=False)
        tau = spec.tau if spec.method == "t2fnorm" else 1.0
        if normalize_at_scoring:
            h_scaled = feature_normalize(h_star, tau, spec.p_norm)
        elif spec.method == "t2fnorm":
            h_scaled = T.scale(h_star, 1.0 / tau)
        else:
            h_scaled = h_star
    return fc(m, h_scaled), h_star, h_scaled


def argmax_rows(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(np.atleast_2d(z), axis=1)  # first maximum on ties


def classify(m: ModelState, x) -> np.ndarray:
    return argmax_rows(forward_train(m, x))


def loss(m: ModelState, x, y) -> Tensor:
    """Mean cross-entropy, plus the weighted mean feature norm for feature_penalty."""
    return loss_and_logits(m, x, y)[0]


def loss_and_logits(m: ModelState, x, y) -> tuple:
    z, h_star = _train_parts(m, x)
    ce = T.cross_entropy(z, y)
    if m.spec.method == "feature_penalty" and m.spec.penalty_weight > 0:
        ce = ce + T.scale(T.mean(T.lp_norm(h_star, 2, axis=1)), m.spec.penalty_weight)
    return ce, z


# ----------------------------------------------------------------------
# snapshots
# ----------------------------------------------------------------------
_MAGIC = b"OODSNAP1"


def save_model(m: ModelState, path) -> None:
    """Write a header (JSON) plus little-endian float64 payloads. Output is deterministic."""
    entries, chunks, offset = [], [], 0
    for p in m.params:
        raw = np.ascontiguousarray(p.value.data, dtype="<f8").tobytes()
        entries.append({"name": p.name, "role": p.role, "shape": list(p.value.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"spec": m.spec.to_dict(), "epoch": m.epoch, "params": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_model(path) -> ModelState:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model snapshot")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    base = 16 + hlen
    params = []
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(e["shape"])
        params.append(Parameter(e["name"], Tensor(arr), e["role"]))
    return ModelState(spec=ModelSpec(**header["spec"]), params=params, epoch=header["epoch"])
