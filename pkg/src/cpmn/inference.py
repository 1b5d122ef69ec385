"""Whole-volume prediction: sliding-window fusion, center-patch classification,
and gradient-weighted class activation maps.

Volumes smaller than the patch are padded symmetrically with edge values and
un-padded after prediction. Windows tile each axis with 50% overlap (the last
window is clamped to the end) and fused per voxel as the uniform average of
all covering windows.
"""

from __future__ import annotations

import numpy as np
import torch

from .core_types import CPMNConfig, Prediction, Volume3D
from .nets import PathwayNetwork


def pad_to_patch(
    data: np.ndarray, patch: tuple[int, int, int]
) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Symmetric edge padding up to at least the patch size; no-op if large enough."""
    pads = []
    for size, target in zip(data.shape, patch):
        deficit = max(target - size, 0)
        before = deficit // 2
        pads.append((before, deficit - before))
    pads = tuple(pads)
    if any(b or a for b, a in pads):
        data = np.pad(data, pads, mode="edge")
    return data, pads


def unpad(data: np.ndarray, pads: tuple[tuple[int, int], ...]) -> np.ndarray:
    slices = tuple(slice(b, s - a if a else None) for (b, a), s in zip(pads, data.shape))
    return data[slices]


def window_starts(size: int, patch: int) -> list[int]:
    """Window offsets along one axis: stride = patch // 2, clamped final window."""
    if size < patch:
        raise ValueError(f"axis size {size} smaller than patch {patch}")
    stride = max(patch // 2, 1)
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def iter_windows(shape: tuple[int, int, int], patch: tuple[int, int, int]):
    for z in window_starts(shape[0], patch[0]):
        for y in window_starts(shape[1], patch[1]):
            for x in window_starts(shape[2], patch[2]):
                yield (
                    slice(z, z + patch[0]),
                    slice(y, y + patch[1]),
                    slice(x, x + patch[2]),
                )


def _to_batch(data: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)).unsqueeze(0).unsqueeze(0)


def sliding_window_segment(
    net: PathwayNetwork, volume: Volume3D, config: CPMNConfig
) -> np.ndarray:
    """Fused per-voxel foreground probability at the input volume's extents."""
    patch = config.patch_size
    data, pads = pad_to_patch(volume.data, patch)
    prob = np.zeros(data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.float64)
    net.eval()
    with torch.no_grad():
        for window in iter_windows(data.shape, patch):
            out = net(_to_batch(data[window]))
            fg = torch.softmax(out.seg_logits, dim=1)[0, 1].numpy()
            prob[window] += fg
            count[window] += 1.0
    fused = (prob / count).astype(np.float32)
    return unpad(fused, pads)


def classify_center_patch(net: PathwayNetwork, volume: Volume3D, config: CPMNConfig) -> float:
    """Foreground-class softmax probability of the single center-cropped patch."""
    patch = config.patch_size
    data, _ = pad_to_patch(volume.data, patch)
    offsets = [(s - p) // 2 for s, p in zip(data.shape, patch)]
    crop = data[tuple(slice(o, o + p) for o, p in zip(offsets, patch))]
    net.eval()
    with torch.no_grad():
        out = net(_to_batch(crop))
        return float(torch.softmax(out.class_logits, dim=1)[0, 1])


def grad_weighted_map(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """Rectified channel-weighted activation sum; weights are spatially pooled gradients.

    Both inputs are (B, C, D, H, W); the result is (B, D, H, W).
    """
    weights = gradients.mean(dim=(2, 3, 4), keepdim=True)
    return torch.relu((weights * activations).sum(dim=1))


def _normalize_unit(cam: np.ndarray) -> np.ndarray:
    lo = float(cam.min())
    hi = float(cam.max())
    if hi - lo < 1e-12:
        return np.zeros_like(cam) if hi < 1e-12 else np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def compute_cam(net: PathwayNetwork, volume: Volume3D, config: CPMNConfig) -> np.ndarray:
    """Foreground-class activation map over the whole volume, normalized to [0, 1].

    Each sliding window contributes a gradient-weighted map of its deepest
    encoder features, trilinearly upsampled to window extents; windows are
    coverage-averaged before the final min-max rescale. An all-zero map stays
    all-zero.
    """
    patch = config.patch_size
    data, pads = pad_to_patch(volume.data, patch)
    acc = np.zeros(data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.float64)
    net.eval()
    for window in iter_windows(data.shape, patch):
        x = _to_batch(data[window])
        out = net(x)
        logit_fg = out.class_logits[0, 1]
        grads = torch.autograd.grad(logit_fg, out.encoder_feature)[0]
        cam = grad_weighted_map(out.encoder_feature.detach(), grads)
        cam = torch.nn.functional.interpolate(
            cam.unsqueeze(1), size=patch, mode="trilinear", align_corners=False
        )[0, 0]
        acc[window] += cam.numpy()
        count[window] += 1.0
    fused = unpad((acc / count).astype(np.float32), pads)
    return _normalize_unit(fused)


def binarize_probmap(probmap: np.ndarray, threshold: float) -> np.ndarray:
    """Strict thresholding, so threshold 1.0 always yields an empty mask."""
    return (probmap > threshold).astype(np.uint8)


def predict_case(
    net: PathwayNetwork, volume: Volume3D, config: CPMNConfig, with_cam: bool = True
) -> Prediction:
    """Assemble the per-case prediction from the three whole-volume operations."""
    return Prediction(
        pe_probability=classify_center_patch(net, volume, config),
        seg_probmap=sliding_window_segment(net, volume, config),
        cam=compute_cam(net, volume, config) if with_cam else None,
    )
