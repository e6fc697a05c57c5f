"""Stochastic training-time transforms and deterministic eval-time preparation.

The training pipeline applies, each with its own probability, a uniform
rotation about the crop center and a random four-corner perspective warp,
both filling exposed pixels with zeros so the network sees the same
out-of-content value as crop padding. Randomness comes exclusively from a
caller-supplied numpy Generator; there is no hidden global state, so parallel
workers just split their own streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class AugmentPolicy:
    rotation_prob: float = 0.5
    rotation_range: tuple[float, float] = (0.0, 360.0)
    perspective_prob: float = 0.5
    perspective_strength: float = 0.3  # max corner displacement, fraction of side
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.rotation_prob <= 1.0:
            raise ValueError(f"rotation_prob {self.rotation_prob} outside [0, 1]")
        if not 0.0 <= self.perspective_prob <= 1.0:
            raise ValueError(f"perspective_prob {self.perspective_prob} outside [0, 1]")
        if not 0.0 <= self.perspective_strength < 0.5:
            raise ValueError(f"perspective_strength {self.perspective_strength} outside [0, 0.5)")
        lo, hi = self.rotation_range
        if not (0.0 <= lo <= hi <= 360.0):
            raise ValueError(f"rotation_range {self.rotation_range} invalid")

    def to_dict(self) -> dict:
        return {
            "rotation_prob": self.rotation_prob,
            "rotation_range": list(self.rotation_range),
            "perspective_prob": self.perspective_prob,
            "perspective_strength": self.perspective_strength,
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AugmentPolicy":
        policy = cls(
            rotation_prob=float(raw.get("rotation_prob", 0.5)),
            rotation_range=tuple(raw.get("rotation_range", (0.0, 360.0))),
            perspective_prob=float(raw.get("perspective_prob", 0.5)),
            perspective_strength=float(raw.get("perspective_strength", 0.3)),
            enabled=bool(raw.get("enabled", True)),
        )
        policy.validate()
        return policy


def disabled_policy() -> AugmentPolicy:
    return AugmentPolicy(enabled=False)


def _to_float_tensor(pixels: np.ndarray) -> torch.Tensor:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected HxWx3 pixels, got shape {pixels.shape}")
    if pixels.dtype == np.uint8:
        arr = pixels.astype(np.float32) / 255.0
    else:
        arr = pixels.astype(np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _normalize(tensor: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=tensor.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=tensor.dtype).view(-1, 1, 1)
    return (tensor - m) / s


def rotate(tensor: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate about the center, bilinear, zero-filled corners, size preserved."""
    return TF.rotate(tensor, angle, interpolation=InterpolationMode.BILINEAR, expand=False, fill=[0.0])


def perspective_endpoints(
    height: int, width: int, strength: float, rng: np.random.Generator
) -> tuple[list[list[int]], list[list[int]]]:
    """Draw the four warped corner positions for a perspective transform.

    Each corner moves inward by up to ``strength`` of the side length along
    both axes, mimicking a viewpoint change on a curved surface.
    """
    dx = int(strength * width)
    dy = int(strength * height)
    start = [[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]]
    tl = [int(rng.integers(0, dx + 1)), int(rng.integers(0, dy + 1))]
    tr = [width - 1 - int(rng.integers(0, dx + 1)), int(rng.integers(0, dy + 1))]
    br = [width - 1 - int(rng.integers(0, dx + 1)), height - 1 - int(rng.integers(0, dy + 1))]
    bl = [int(rng.integers(0, dx + 1)), height - 1 - int(rng.integers(0, dy + 1))]
    return start, [tl, tr, br, bl]


def perspective(tensor: torch.Tensor, startpoints, endpoints) -> torch.Tensor:
    return TF.perspective(
        tensor, startpoints, endpoints, interpolation=InterpolationMode.BILINEAR, fill=[0.0]
    )


def prepare_eval(pixels: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> torch.Tensor:
    """Deterministic evaluation-time preparation: scale to [0,1], normalize."""
    return _normalize(_to_float_tensor(pixels), mean, std)


def prepare_train(
    pixels: np.ndarray,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
) -> torch.Tensor:
    """Stochastic training-time preparation.

    Identical rng state yields a bit-identical tensor; a disabled policy makes
    this equal prepare_eval exactly (the mechanism behind the fine-tune stage).
    """
    tensor = _to_float_tensor(pixels)
    if policy.enabled:
        if rng.random() < policy.rotation_prob:
            angle = float(rng.uniform(policy.rotation_range[0], policy.rotation_range[1]))
            tensor = rotate(tensor, angle)
        if rng.random() < policy.perspective_prob:
            start, end = perspective_endpoints(
                tensor.shape[1], tensor.shape[2], policy.perspective_strength, rng
            )
            tensor = perspective(tensor, start, end)
    return _normalize(tensor, mean, std)
