"""Q-function: a small convolutional network over stacked slice images,
plus a versioned, checksummed checkpoint format.

The default desk-scale architecture is four conv blocks with global average
pooling and a linear head; the descriptor keeps input size, channel widths
and head type configurable so larger variants remain expressible.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .pose import Action

N_ACTIONS = len(Action)

CHECKPOINT_MAGIC = "SNCK1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor stored alongside the parameters."""

    frame_stack: int = 4
    image_h: int = 64
    image_w: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64, 128)
    head: str = "gap"  # "gap" = global average pool, "flatten" = keep layout
    hidden: int = 128

    def __post_init__(self):
        if self.head not in ("gap", "flatten"):
            raise ValueError(f"unknown head {self.head!r}")
        if min(self.frame_stack, self.image_h, self.image_w, self.hidden) < 1:
            raise ValueError("all sizes must be positive")
        if len(self.conv_channels) < 1:
            raise ValueError("need at least one conv block")
        if min(self.image_h, self.image_w) < 2 ** len(self.conv_channels):
            raise ValueError("too many conv blocks for the image size")


def build_network(spec: NetworkSpec) -> nn.Module:
    layers: list[nn.Module] = []
    channels = spec.frame_stack
    for out_channels in spec.conv_channels:
        layers += [
            nn.Conv2d(channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        ]
        channels = out_channels
    if spec.head == "gap":
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        feature_dim = channels
    else:
        layers.append(nn.Flatten())
        pooled_h = spec.image_h // 2 ** len(spec.conv_channels)
        pooled_w = spec.image_w // 2 ** len(spec.conv_channels)
        feature_dim = channels * pooled_h * pooled_w
    layers += [
        nn.Linear(feature_dim, spec.hidden),
        nn.ReLU(),
        nn.Linear(spec.hidden, N_ACTIONS),
    ]
    return nn.Sequential(*layers)


class QFunction:
    """Observation -> 10 Q-values, with numpy in/out at the boundary."""

    def __init__(self, spec: NetworkSpec, net: nn.Module | None = None):
        self.spec = spec
        self.net = net if net is not None else build_network(spec)
        self.net.eval()

    def clone(self) -> "QFunction":
        other = QFunction(self.spec)
        other.net.load_state_dict(self.net.state_dict())
        return other

    def sync_from(self, other: "QFunction") -> None:
        self.net.load_state_dict(other.net.state_dict())

    def _check_shape(self, obs: np.ndarray) -> None:
        expected = (self.spec.frame_stack, self.spec.image_h, self.spec.image_w)
        if obs.shape[-3:] != expected:
            raise ValueError(f"observation shape {obs.shape} does not match {expected}")

    def as_batch(self, obs: np.ndarray) -> torch.Tensor:
        """uint8 (m,h,w) or (B,m,h,w) -> float batch scaled to [0, 1]."""
        self._check_shape(obs)
        arr = torch.from_numpy(np.ascontiguousarray(obs)).float() / 255.0
        if arr.dim() == 3:
            arr = arr.unsqueeze(0)
        return arr

    def forward(self, obs: np.ndarray) -> np.ndarray:
        """Q-values for a single observation, shape (10,)."""
        with torch.no_grad():
            out = self.net(self.as_batch(obs))
        values = out.squeeze(0).numpy()
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("non-finite Q-values")
        return values

    def greedy(self, obs: np.ndarray) -> int:
        """Argmax action; ties go to the lowest index."""
        return int(np.argmax(self.forward(obs)))


def q_forward(q: QFunction, obs: np.ndarray) -> np.ndarray:
    return q.forward(obs)


# ---------------------------------------------------------------------------
# Checkpoints: magic + json header (descriptor, tensor table, sha256) + blob.

def checkpoint_save(q: QFunction, path) -> None:
    state = q.net.state_dict()
    tensors = []
    chunks = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(q.spec),
        "tensors": tensors,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    payload = json.dumps(header, sort_keys=True).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\n{len(payload)}\n".encode("ascii"))
        fh.write(payload)
        fh.write(blob)


def checkpoint_load(path) -> QFunction:
    with open(path, "rb") as fh:
        magic = fh.readline().strip().decode("ascii", errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        try:
            header_len = int(fh.readline())
            header = json.loads(fh.read(header_len))
        except (ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        blob = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise CheckpointError("checksum mismatch: checkpoint file is corrupted")
    arch = dict(header["arch"])
    arch["conv_channels"] = tuple(arch["conv_channels"])
    try:
        spec = NetworkSpec(**arch)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad architecture descriptor: {exc}") from exc
    q = QFunction(spec)
    state = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = blob[offset : offset + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError("truncated parameter blob")
        offset += 4 * count
        state[entry["name"]] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        )
    if offset != len(blob):
        raise CheckpointError("parameter blob has trailing bytes")
    try:
        q.net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameters do not fit the descriptor: {exc}") from exc
    return q
