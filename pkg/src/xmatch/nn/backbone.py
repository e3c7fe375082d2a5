from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .._validation import ValidationError


@dataclass
class FeaturePyramid:
    """Per-image features at 1/8, 1/4 and 1/2 of the padded input size.

    Tensors are batched and channels-first: ``[B, C, H/s, W/s]``.
    """

    f_coarse: torch.Tensor
    f_mid: torch.Tensor
    f_fine: torch.Tensor
    validity_mask_coarse: torch.Tensor | None = None


def conv3x3(in_planes, out_planes, stride=1):
    return nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = conv3x3(in_planes, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        if stride == 1 and in_planes == planes:
            self.downsample = None
        else:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.downsample is not None:
            x = self.downsample(x)
        return self.relu(x + y)


class ResNetEncoder(nn.Module):
    """Residual encoder: stride-2 stem, then one stage per output scale.

    ``widths`` are the channel counts at 1/2, 1/4 and 1/8.
    """

    def __init__(self, widths=(64, 128, 256), blocks=(2, 2, 2)):
        super().__init__()
        c2, c4, c8 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(1, c2, 5, stride=2, padding=2, bias=False),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
        )
        self.layer2 = self._make_stage(c2, c2, blocks[0], stride=1)
        self.layer4 = self._make_stage(c2, c4, blocks[1], stride=2)
        self.layer8 = self._make_stage(c4, c8, blocks[2], stride=2)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @staticmethod
    def _make_stage(in_planes, planes, n, stride):
        layers = [BasicBlock(in_planes, planes, stride)]
        layers += [BasicBlock(planes, planes) for _ in range(n - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected [B, 1, H, W] input, got {tuple(x.shape)}")
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValidationError(f"input dims {tuple(x.shape[-2:])} must be multiples of 8")
        f2 = self.layer2(self.stem(x))
        f4 = self.layer4(f2)
        f8 = self.layer8(f4)
        return f8, f4, f2


def extract_pyramid(image: torch.Tensor, encoder: ResNetEncoder,
                    mask: torch.Tensor | None = None) -> FeaturePyramid:
    """Run the shared encoder on ``[B, 1, H, W]`` images."""
    f8, f4, f2 = encoder(image)
    mask8 = None
    if mask is not None:
        mask8 = downsample_mask(mask, 8)
    return FeaturePyramid(f8, f4, f2, mask8)


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Cell is valid when all of its pixels are valid; ``mask`` is ``[B, H, W]``."""
    b, h, w = mask.shape
    return mask.reshape(b, h // factor, factor, w // factor, factor).all(-1).all(-2)
