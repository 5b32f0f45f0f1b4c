"""Feature imitation on pooled general-instance regions.

Each selected GI box is assigned to one pyramid level, pooled to a fixed
10x10 grid with ROIAlign, and the student's pooled feature is mapped to the
teacher's channel width by a single 3x3 convolution before a squared-L2
imitation loss.

ROIAlign conventions pinned here (and mirrored by the test oracle):
    * image coord -> feature coord is ``x / stride - 0.5`` (aligned),
    * each output bin averages ``sampling_ratio ** 2`` bilinear samples at
      regular sub-bin centers,
    * the feature map is zero outside its extent (zero-padded bilinear).
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

__all__ = [
    "assign_fpn_level",
    "roi_align",
    "roi_align_multi",
    "FeatureAdapter",
    "feature_loss",
]


def assign_fpn_level(box, num_levels: int, base_stride: int) -> int:
    """Map a box to a pyramid level by scale.

    The canonical box edge for level 0 is ``4 * base_stride`` (the anchor
    scale); each level up doubles it. Returns
    ``clamp(floor(log2(sqrt(area) / canonical)), 0, num_levels - 1)``,
    with zero-area boxes pinned to level 0.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    area = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    if area <= 0.0:
        return 0
    canonical = 4.0 * float(base_stride)
    level = math.floor(math.log2(math.sqrt(area) / canonical))
    return int(min(max(level, 0), num_levels - 1))


def roi_align_multi(
    features: torch.Tensor,
    stride: float,
    boxes,
    out_size: tuple[int, int] = (10, 10),
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Pool ``[N, 4]`` boxes from a single-level ``[D, H, W]`` feature map.

    Differentiable in ``features``. Samples falling outside the map read
    zeros, so boxes partially outside the feature extent are well defined.
    Returns ``[N, D, out_h, out_w]`` in the input dtype.
    """
    if features.dim() != 3:
        raise ValueError(f"features must be [D, H, W], got {tuple(features.shape)}")
    device, dtype = features.device, features.dtype
    d, h, w = features.shape
    out_h, out_w = out_size
    sr = int(sampling_ratio)

    boxes_t = torch.as_tensor(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                              device=device, dtype=dtype)
    n = boxes_t.shape[0]
    if n == 0:
        return features.new_zeros((0, d, out_h, out_w))
    # aligned convention: continuous image coord u sits at feature coord u/stride - 0.5
    fx1 = boxes_t[:, 0] / stride - 0.5
    fy1 = boxes_t[:, 1] / stride - 0.5
    bin_w = (boxes_t[:, 2] - boxes_t[:, 0]) / stride / out_w
    bin_h = (boxes_t[:, 3] - boxes_t[:, 1]) / stride / out_h

    # sub-bin sample centers along each axis: [N, out * sr]
    gx = torch.arange(out_w * sr, device=device, dtype=dtype)
    gy = torch.arange(out_h * sr, device=device, dtype=dtype)
    xs = fx1[:, None] + (gx[None, :] + 0.5) * (bin_w[:, None] / sr)
    ys = fy1[:, None] + (gy[None, :] + 0.5) * (bin_h[:, None] / sr)

    yy = ys[:, :, None].expand(n, out_h * sr, out_w * sr)
    xx = xs[:, None, :].expand(n, out_h * sr, out_w * sr)

    x0 = torch.floor(xx)
    y0 = torch.floor(yy)
    wx1 = xx - x0
    wy1 = yy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    x0i = x0.long()
    y0i = y0.long()

    flat = features.reshape(d, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(-1)
        vals = flat[:, idx].reshape(d, n, out_h * sr, out_w * sr)
        return vals * valid.to(dtype)[None]

    sampled = (
        gather(y0i, x0i) * (wy0 * wx0)[None]
        + gather(y0i, x0i + 1) * (wy0 * wx1)[None]
        + gather(y0i + 1, x0i) * (wy1 * wx0)[None]
        + gather(y0i + 1, x0i + 1) * (wy1 * wx1)[None]
    )
    # average the sr x sr samples of each bin; put the box axis first
    return sampled.reshape(d, n, out_h, sr, out_w, sr).mean(dim=(3, 5)).permute(1, 0, 2, 3)


def roi_align(
    features: torch.Tensor,
    stride: float,
    box,
    out_size: tuple[int, int] = (10, 10),
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Pool one box from a single-level ``[D, H, W]`` map; see
    :func:`roi_align_multi`. Returns ``[D, out_h, out_w]``."""
    return roi_align_multi(features, stride, [box], out_size, sampling_ratio)[0]


class FeatureAdapter(nn.Module):
    """3x3 same-padding convolution mapping student channels to teacher's.

    This is the only trainable piece of the feature/relation path; it starts
    as the identity whenever the channel counts agree so that an identical
    teacher/student pair produces exactly zero imitation loss at step 0.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        if in_channels == out_channels:
            self.identity_init()

    def identity_init(self) -> None:
        if self.conv.in_channels != self.conv.out_channels:
            raise ValueError("identity init needs matching channel counts")
        with torch.no_grad():
            self.conv.weight.zero_()
            for c in range(self.conv.in_channels):
                self.conv.weight[c, c, 1, 1] = 1.0
            self.conv.bias.zero_()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.dim() == 3:
            return self.conv(pooled[None])[0]
        if pooled.dim() == 4:
            return self.conv(pooled)
        raise ValueError(f"expected [K, D, h, w] or [D, h, w], got {tuple(pooled.shape)}")


def feature_loss(teacher_feats: torch.Tensor, adapted_student_feats: torch.Tensor) -> torch.Tensor:
    """Mean over instances of the squared L2 distance between pooled features.

    Inputs are ``[K, D, h, w]`` stacks (or empty); the squared norm sums over
    all entries of one instance. An empty selection contributes 0.
    """
    if teacher_feats.numel() == 0 or len(teacher_feats) == 0:
        return torch.zeros((), dtype=adapted_student_feats.dtype
                           if isinstance(adapted_student_feats, torch.Tensor)
                           else torch.float32)
    if teacher_feats.shape != adapted_student_feats.shape:
        raise ValueError(
            f"shape mismatch: {tuple(teacher_feats.shape)} vs "
            f"{tuple(adapted_student_feats.shape)}"
        )
    diff = teacher_feats.detach() - adapted_student_feats
    k = diff.shape[0]
    return diff.reshape(k, -1).pow(2).sum(dim=1).mean()
