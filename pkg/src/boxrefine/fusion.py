"""Correlation operators fusing reference (kernel) and test (search) features.

All operators take batched tensors ``K: (B, C, H0, W0)`` and
``S: (B, C, H, W)``; unbatched ``(C, H, W)`` inputs are accepted and returned
unbatched. They are plain torch ops, so autograd supplies the gradients.

Naive and depth-wise correlation zero-pad ``S`` so the output keeps ``S``'s
spatial size: ``(k - 1) // 2`` rows/cols before and the rest after, which is
the usual "same" convention for even kernels as well.
"""

import torch
import torch.nn.functional as F

FUSION_KINDS = ("naive", "depthwise", "pixelwise")


def _batched(kernel, search):
    if kernel.dim() != search.dim() or kernel.dim() not in (3, 4):
        raise ValueError(f"expected matching 3-D or 4-D tensors, got {tuple(kernel.shape)} and {tuple(search.shape)}")
    squeeze = kernel.dim() == 3
    if squeeze:
        kernel, search = kernel.unsqueeze(0), search.unsqueeze(0)
    if kernel.shape[0] != search.shape[0]:
        raise ValueError(f"batch mismatch: {kernel.shape[0]} vs {search.shape[0]}")
    if kernel.shape[1] != search.shape[1]:
        raise ValueError(f"channel mismatch: kernel has {kernel.shape[1]}, search has {search.shape[1]}")
    return kernel, search, squeeze


def _same_pad(kernel, search):
    kh, kw = kernel.shape[-2:]
    h, w = search.shape[-2:]
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than search feature {h}x{w}")
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return F.pad(search, (left, kw - 1 - left, top, kh - 1 - top))


def pixelwise_correlation(kernel: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Correlate every kernel position, as a 1x1 kernel, with the search map.

    Output channel ``j = jy * W0 + jx`` (row-major over kernel positions)
    holds ``sum_c K[c, jy, jx] * S[c, y, x]``; shape ``(B, H0*W0, H, W)``.
    """
    kernel, search, squeeze = _batched(kernel, search)
    b, c, h, w = search.shape
    out = torch.bmm(kernel.flatten(2).transpose(1, 2), search.flatten(2))
    out = out.view(b, -1, h, w)
    return out[0] if squeeze else out


def depthwise_correlation(kernel: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Per-channel 2-D cross-correlation; shape ``(B, C, H, W)``."""
    kernel, search, squeeze = _batched(kernel, search)
    b, c = search.shape[:2]
    padded = _same_pad(kernel, search)
    out = F.conv2d(padded.reshape(1, b * c, *padded.shape[-2:]),
                   kernel.reshape(b * c, 1, *kernel.shape[-2:]), groups=b * c)
    out = out.view(b, c, *search.shape[-2:])
    return out[0] if squeeze else out


def naive_correlation(kernel: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Full-channel cross-correlation, one response map; shape ``(B, 1, H, W)``."""
    kernel, search, squeeze = _batched(kernel, search)
    b, c = search.shape[:2]
    padded = _same_pad(kernel, search)
    out = F.conv2d(padded.reshape(1, b * c, *padded.shape[-2:]), kernel, groups=b)
    out = out.view(b, 1, *search.shape[-2:])
    return out[0] if squeeze else out


def correlate(kernel: torch.Tensor, search: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "pixelwise":
        return pixelwise_correlation(kernel, search)
    if kind == "depthwise":
        return depthwise_correlation(kernel, search)
    if kind == "naive":
        return naive_correlation(kernel, search)
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def correlation_channels(kind: str, channels: int, kernel_hw: tuple) -> int:
    """Number of channels ``correlate`` produces for the given inputs."""
    if kind == "pixelwise":
        return kernel_hw[0] * kernel_hw[1]
    if kind == "depthwise":
        return channels
    if kind == "naive":
        return 1
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
