"""Differentiable model backend: feature capture, scalar targets, summed-target gradients.

Two desk-scale reference models live here as well. Neither uses batch
normalization, so samples never interact along the batch axis; that
independence is what makes a single backward pass on the summed target
scalar exact for every sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LinkageError, NumericError, ShapeError

SPATIAL_RULES = ("drop-leading-token", "identity", "none")
SELECTOR_MODES = ("ground-truth-logit", "value-head", "custom-index")


@dataclass
class FeatureMapBatch:
    values: torch.Tensor  # B x K x h x w
    layer_id: str

    def __post_init__(self):
        if self.values.dim() != 4 or min(self.values.shape) < 1:
            raise ShapeError(f"feature maps must be B x K x h x w, got {tuple(self.values.shape)}")

    @property
    def grid(self):
        return tuple(self.values.shape[-2:])


@dataclass(frozen=True)
class ScalarTargetSelector:
    mode: str = "ground-truth-logit"
    indices: torch.Tensor | None = None

    def __post_init__(self):
        if self.mode not in SELECTOR_MODES:
            raise ConfigError(f"unknown selector mode {self.mode!r}")
        if self.mode != "value-head" and self.indices is None:
            raise ConfigError(f"selector mode {self.mode!r} needs per-sample indices")

    def subset(self, start, stop=None):
        """Selector restricted to samples ``start:stop`` (a single sample if ``stop`` is None)."""
        if self.indices is None:
            return self
        stop = start + 1 if stop is None else stop
        return ScalarTargetSelector(self.mode, self.indices[start:stop])

    @classmethod
    def ground_truth(cls, labels):
        return cls("ground-truth-logit", torch.as_tensor(labels, dtype=torch.long))

    @classmethod
    def value_head(cls):
        return cls("value-head")


@dataclass(frozen=True)
class SpatialReshapeRule:
    kind: str = "none"
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in SPATIAL_RULES:
            raise ConfigError(f"unknown reshape rule {self.kind!r}")
        if self.kind != "none" and self.grid is None:
            raise ConfigError(f"reshape rule {self.kind!r} needs a target grid")

    def expected_tokens(self):
        h, w = self.grid
        return h * w + (1 if self.kind == "drop-leading-token" else 0)


@dataclass
class BackwardCounter:
    """Counts backward traversals issued through the toolkit."""

    count: int = 0
    by_tag: dict = field(default_factory=dict)

    def tick(self, tag="backward"):
        self.count += 1
        self.by_tag[tag] = self.by_tag.get(tag, 0) + 1


def tokens_to_spatial(sequence, rule):
    """Reshape a B x N x C token batch into B x C x h x w spatial maps."""
    if rule.kind == "none":
        raise ShapeError("reshape rule 'none' applies to inputs that are already spatial")
    if sequence.dim() != 3:
        raise ShapeError(f"token batch must be B x N x C, got {tuple(sequence.shape)}")
    n = sequence.shape[1]
    if n != rule.expected_tokens():
        raise ShapeError(
            f"sequence length {n} incompatible with rule {rule.kind!r} on grid {rule.grid}"
        )
    if rule.kind == "drop-leading-token":
        sequence = sequence[:, 1:]
    h, w = rule.grid
    return sequence.transpose(1, 2).reshape(sequence.shape[0], sequence.shape[2], h, w)


def spatial_to_tokens(spatial, rule, leading=None):
    """Inverse of :func:`tokens_to_spatial`; ``leading`` is the dropped token (B x 1 x C)."""
    tokens = spatial.flatten(2).transpose(1, 2)
    if rule.kind == "drop-leading-token":
        if leading is None:
            raise ShapeError("drop-leading-token inverse needs the leading token")
        tokens = torch.cat([leading, tokens], dim=1)
    return tokens


# ---------------------------------------------------------------------------
# reference models


def _conv(cin, cout):
    # GroupNorm normalizes each sample on its own, unlike BatchNorm
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU()]


class TinyCNN(nn.Module):
    """Four conv layers at two poolings, global average pooling, linear head."""

    default_capture_layer = "features"

    def __init__(self, n_classes=3, width=16, feature_channels=32):
        super().__init__()
        self.n_classes = n_classes
        self.stem = nn.Sequential(*_conv(3, width), nn.MaxPool2d(2))
        self.block = nn.Sequential(*_conv(width, 2 * width), nn.MaxPool2d(2), *_conv(2 * width, 2 * width))
        self.features = nn.Sequential(nn.Conv2d(2 * width, feature_channels, 3, padding=1), nn.ReLU())
        self.head = nn.Linear(feature_channels, n_classes)

    def forward(self, x):
        x = self.features(self.block(self.stem(x)))
        return self.head(x.mean(dim=(2, 3)))


class _Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        # explicit softmax attention; fused kernels lack double-backward on some builds
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    """Patch-tokenizing transformer with a classification token.

    Token outputs are mapped back onto the patch grid by dropping the
    classification token, so Grad-CAM works on any block's output.
    """

    def __init__(self, n_classes=3, image_size=64, patch_size=8, dim=32, depth=2, heads=2):
        super().__init__()
        if image_size % patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        self.n_classes = n_classes
        g = image_size // patch_size
        self.token_rule = SpatialReshapeRule("drop-leading-token", (g, g))
        self.patch_embed = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, g * g + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, n_classes)
        # input of the last block: patch tokens still feed the class token from here
        self.default_capture_layer = f"blocks.{max(depth - 2, 0)}"

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x)[:, 0])


MODELS = {"tiny_cnn": TinyCNN, "tiny_vit": TinyViT}


def build_model(name, n_classes=3, image_size=64, seed=None, **kwargs):
    """Instantiate a reference model; ``seed`` makes the initialization reproducible."""
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    if seed is not None:
        torch.manual_seed(seed)
    if name == "tiny_vit":
        kwargs.setdefault("image_size", image_size)
    return MODELS[name](n_classes=n_classes, **kwargs)


# ---------------------------------------------------------------------------
# operations


def forward_with_capture(model, images, layer_id=None):
    """Run ``model`` on ``images`` and capture the feature maps of ``layer_id``.

    Token outputs (B x N x C) are reshaped through the model's ``token_rule``
    inside the hook and re-tokenized, so the captured spatial tensor sits on
    the path to the logits and can be differentiated against.
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"image batch must be B x 3 x H x W, got {tuple(images.shape)}")
    layer_id = layer_id or model.default_capture_layer
    try:
        module = model.get_submodule(layer_id)
    except AttributeError as exc:
        raise ConfigError(f"model has no capturable layer {layer_id!r}") from exc
    rule = getattr(model, "token_rule", None)
    captured = {}

    def hook(_module, _inputs, out):
        if not out.requires_grad:
            # frozen weights: make the capture point a leaf so gradients still exist
            out = out.detach().requires_grad_(True)
        if out.dim() == 4:
            captured["values"] = out
            return out
        if out.dim() == 3 and rule is not None:
            spatial = tokens_to_spatial(out, rule)
            captured["values"] = spatial
            leading = out[:, :1] if rule.kind == "drop-leading-token" else None
            return spatial_to_tokens(spatial, rule, leading)
        raise ShapeError(f"layer {layer_id!r} output {tuple(out.shape)} is not spatial")

    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = model(images)
    finally:
        handle.remove()
    if "values" not in captured:
        raise ConfigError(f"layer {layer_id!r} was not executed in the forward pass")
    feats = FeatureMapBatch(captured["values"], layer_id)
    if not torch.isfinite(logits).all() or not torch.isfinite(feats.values).all():
        raise NumericError(f"non-finite activations at layer {layer_id!r} or in the logits")
    return logits, feats


def select_scalar(outputs, selector):
    """One scalar per sample: ground-truth logit, value estimate, or a chosen index."""
    if selector.mode == "value-head":
        if outputs.dim() == 2 and outputs.shape[1] == 1:
            return outputs[:, 0]
        if outputs.dim() == 1:
            return outputs
        raise ShapeError(f"value-head outputs must be B or B x 1, got {tuple(outputs.shape)}")
    idx = torch.as_tensor(selector.indices, dtype=torch.long, device=outputs.device).reshape(-1)
    if idx.shape[0] != outputs.shape[0]:
        raise ShapeError(f"{idx.shape[0]} indices for a batch of {outputs.shape[0]}")
    n = outputs.shape[1]
    if ((idx < 0) | (idx >= n)).any():
        raise IndexError(f"target index out of range for {n} outputs: {idx.tolist()}")
    return outputs.gather(1, idx[:, None])[:, 0]


def gradients_for_summed_target(features, scalars, retain_higher_order=False, retain_graph=None,
                                counter=None):
    """Gradient of ``sum(scalars)`` with respect to the captured feature maps.

    One backward traversal serves the whole batch. With ``retain_higher_order``
    the result stays attached to the graph so a loss built from it can be
    differentiated with respect to the model parameters.
    """
    values = features.values if isinstance(features, FeatureMapBatch) else features
    if retain_graph is None:
        retain_graph = retain_higher_order
    if not scalars.requires_grad or not values.requires_grad:
        raise LinkageError("features or target scalars carry no autograd history")
    try:
        (grads,) = torch.autograd.grad(
            scalars.sum(), values, create_graph=retain_higher_order,
            retain_graph=retain_graph, allow_unused=True,
        )
    except RuntimeError as exc:
        raise LinkageError(f"cannot differentiate target through captured features: {exc}") from exc
    if counter is not None:
        counter.tick("attention")
    if grads is None:
        raise LinkageError("captured features are detached from the target scalar")
    return grads
