"""A minimal one-stage detector with randomly initialised weights.

Serves two purposes: an executable example of the model contract that
`export` expects, and the workhorse for round-trip tests. Three strided
stages produce /8, /16, /32 feature maps (tap names ``stage8``,
``stage16``, ``stage32``); a 1x1 head per stage predicts objectness,
four box offsets, and per-class logits at every cell. Construction is
seeded so identical seeds give identical weights and therefore
identical exports.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .export import RawDetection

TAP_FACTORS = {"stage8": 8, "stage16": 16, "stage32": 32}


def _strided_block(in_ch: int, out_ch: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    ch = in_ch
    for _ in range(layers):
        mods.append(nn.Conv2d(ch, out_ch, kernel_size=3, stride=2, padding=1))
        mods.append(nn.ReLU())
        ch = out_ch
    return nn.Sequential(*mods)


class TinyDetector(nn.Module):
    def __init__(self, num_classes: int, seed: int = 0):
        super().__init__()
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.stage8 = _strided_block(3, 16, layers=3)
        self.stage16 = _strided_block(16, 24, layers=1)
        self.stage32 = _strided_block(24, 32, layers=1)
        self.heads = nn.ModuleList(
            nn.Conv2d(ch, 5 + num_classes, kernel_size=1) for ch in (16, 24, 32)
        )
        self._reseed(seed)

    def _reseed(self, seed: int) -> None:
        # Default Conv2d init draws from the global RNG; replay every
        # parameter from a private generator so construction order and
        # ambient torch state cannot affect the weights.
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in self.parameters():
                if param.ndim > 1:
                    fan_in = math.prod(param.shape[1:])
                    bound = 1.0 / math.sqrt(fan_in)
                else:
                    bound = 0.1
                fresh = torch.empty_like(param).uniform_(-bound, bound, generator=gen)
                param.copy_(fresh)

    def forward(self, batch: torch.Tensor) -> list[list[RawDetection]]:
        f8 = self.stage8(batch)
        f16 = self.stage16(f8)
        f32 = self.stage32(f16)
        height = batch.shape[2]
        width = batch.shape[3]

        per_image: list[list[RawDetection]] = [[] for _ in range(batch.shape[0])]
        levels = zip((f8, f16, f32), self.heads, (8, 16, 32))
        for stride_index, (feature, head, factor) in enumerate(levels, start=1):
            raw = head(feature)
            objectness = torch.sigmoid(raw[:, 0])
            offsets = torch.sigmoid(raw[:, 1:5])
            logits = raw[:, 5:]
            class_prob, class_id = torch.sigmoid(logits).max(dim=1)
            confidence = objectness * class_prob
            for b in range(batch.shape[0]):
                per_image[b].extend(
                    self._decode_level(
                        confidence[b],
                        class_id[b],
                        logits[b],
                        offsets[b],
                        stride_index,
                        factor,
                        width,
                        height,
                    )
                )
        return per_image

    def _decode_level(
        self,
        confidence: torch.Tensor,
        class_id: torch.Tensor,
        logits: torch.Tensor,
        offsets: torch.Tensor,
        stride_index: int,
        factor: int,
        width: int,
        height: int,
    ) -> list[RawDetection]:
        detections = []
        for r in range(confidence.shape[0]):
            for c in range(confidence.shape[1]):
                cx = (c + 0.5) * factor
                cy = (r + 0.5) * factor
                # Extents span 0.75..2.25 cells so boxes overlap their
                # neighbours but stay local to the emitting cell.
                left, top, right, bottom = (
                    factor * (0.75 + 1.5 * offsets[i, r, c].item()) for i in range(4)
                )
                box = (
                    max(cx - left, 0.0),
                    max(cy - top, 0.0),
                    min(cx + right, float(width)),
                    min(cy + bottom, float(height)),
                )
                if box[2] - box[0] <= 0.0 or box[3] - box[1] <= 0.0:
                    continue
                detections.append(
                    RawDetection(
                        box=box,
                        class_id=int(class_id[r, c].item()),
                        confidence=float(confidence[r, c].item()),
                        stride_index=stride_index,
                        logits=tuple(float(v) for v in logits[:, r, c]),
                    )
                )
        return detections
