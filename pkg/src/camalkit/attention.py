"""Grad-CAM attention for a whole mini-batch, plus the per-sample reference path."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backend import forward_with_capture, gradients_for_summed_target, select_scalar
from .errors import FormatError, ShapeError, UnsupportedError


@dataclass
class AttentionMapBatch:
    values: torch.Tensor  # B x H x W, in [0, 1]
    source_resolution: tuple[int, int]


def _tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float32)


def gradcam_batch(features, grads):
    """Raw CAMs from feature maps and their gradients, both B x K x h x w.

    Channel weights are the spatial mean of the gradients; maps are averaged
    (not summed) over the K channels before the ReLU.
    """
    features, grads = _tensor(features), _tensor(grads)
    if features.shape != grads.shape or features.dim() != 4:
        raise ShapeError(f"features {tuple(features.shape)} and grads {tuple(grads.shape)} must match as B x K x h x w")
    weights = grads.mean(dim=(2, 3))
    # contract over channels without materializing the B x K x h x w product
    return F.relu(torch.einsum("bk,bkhw->bhw", weights, features) / features.shape[1])


def extract_cams(model, images, selector, layer_id=None, retain_higher_order=False, retain_graph=None,
                 counter=None):
    """Batch-level extraction: one forward, one backward on the summed target.

    Returns ``(raw_cams, outputs, features)``; ``outputs`` are the model
    outputs so callers can reuse them for the task loss.
    """
    outputs, feats = forward_with_capture(model, images, layer_id)
    scalars = select_scalar(outputs, selector)
    grads = gradients_for_summed_target(
        feats, scalars, retain_higher_order=retain_higher_order,
        retain_graph=retain_graph, counter=counter,
    )
    return gradcam_batch(feats.values, grads), outputs, feats


def gradcam_per_sample_oracle(model, images, selector, layer_id=None, retain_higher_order=False,
                              counter=None, return_outputs=False):
    """Per-sample reference path: one forward, then B isolated backward passes.

    Each pass starts from a single sample's target scalar, so the result is
    that sample's exact gradient whether or not samples interact. Used to
    check the batch-level extraction and as the overhead baseline.
    """
    outputs, feats = forward_with_capture(model, images, layer_id)
    scalars = select_scalar(outputs, selector)
    n = images.shape[0]
    cams = []
    for b in range(n):
        (g,) = torch.autograd.grad(scalars[b], feats.values, create_graph=retain_higher_order,
                                   retain_graph=retain_higher_order or b < n - 1)
        if counter is not None:
            counter.tick("attention")
        f = feats.values[b : b + 1]
        cams.append(gradcam_batch(f if retain_higher_order else f.detach(), g[b : b + 1]))
    cams = torch.cat(cams, dim=0)
    return (cams, outputs) if return_outputs else cams


def normalize_minmax(raw):
    """Per-sample min-max scaling to [0, 1]; constant maps become all zeros."""
    raw = _tensor(raw)
    flat = raw.reshape(raw.shape[0], -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    constant = span <= 0
    safe = torch.where(constant, torch.ones_like(span), span)
    out = torch.where(constant, torch.zeros_like(flat), (flat - lo) / safe)
    return AttentionMapBatch(out.reshape(raw.shape), tuple(raw.shape[-2:]))


def upsample_to(maps, height, width):
    """Bilinear upsampling (half-pixel centres) to ``height x width``, clamped to [0, 1]."""
    values = maps.values if isinstance(maps, AttentionMapBatch) else _tensor(maps)
    source = maps.source_resolution if isinstance(maps, AttentionMapBatch) else tuple(values.shape[-2:])
    h, w = values.shape[-2:]
    if height < h or width < w:
        raise UnsupportedError(f"downscaling {h}x{w} -> {height}x{width} is not supported")
    if (h, w) == (height, width):
        out = values
    else:
        out = F.interpolate(values[:, None], size=(height, width), mode="bilinear", align_corners=False)[:, 0]
    return AttentionMapBatch(out.clamp(0.0, 1.0), source)


def attention_maps(model, images, selector, layer_id=None, size=None):
    """Normalized, upsampled attention for evaluation (no higher-order graph)."""
    raw, outputs, _ = extract_cams(model, images, selector, layer_id)
    maps = normalize_minmax(raw.detach())
    height, width = size or images.shape[-2:]
    return upsample_to(maps, height, width), outputs.detach()


# ---------------------------------------------------------------------------
# export

_MAGIC = b"CAMA"
_VERSION = 1


def save_attention_png(path, attention):
    """Write one H x W map as 8-bit grayscale, value = round(255 * H)."""
    from PIL import Image

    arr = np.asarray(attention, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("PNG export takes a single H x W map")
    Image.fromarray(np.round(255.0 * np.clip(arr, 0, 1)).astype(np.uint8), mode="L").save(path)


def save_attention_array(path, values):
    """Raw float32 container: b"CAMA", uint32 version, uint32 ndim, ndim x uint32 dims, data (little-endian, C order)."""
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_attention_array(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not an attention array container")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    expected = int(np.prod(shape)) * 4
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).copy()
