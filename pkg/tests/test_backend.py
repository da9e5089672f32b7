import pytest
import torch

from camalkit.backend import (
    BackwardCounter, FeatureMapBatch, ScalarTargetSelector, SpatialReshapeRule, build_model,
    forward_with_capture, gradients_for_summed_target, select_scalar, spatial_to_tokens, tokens_to_spatial,
)
from camalkit.errors import ConfigError, LinkageError, NumericError, ShapeError


def test_cnn_capture_shapes():
    model = build_model("tiny_cnn", seed=0, feature_channels=8)
    logits, feats = forward_with_capture(model, torch.randn(2, 3, 56, 56))
    assert logits.shape == (2, 3)
    assert feats.values.shape == (2, 8, 14, 14)
    assert feats.grid == (14, 14)


def test_vit_capture_drop_leading_token():
    model = build_model("tiny_vit", seed=0, image_size=16, patch_size=8)
    assert model.token_rule.kind == "drop-leading-token"
    logits, feats = forward_with_capture(model, torch.randn(2, 3, 16, 16))
    # 4 patches plus a classification token -> 2 x 2 grid
    assert logits.shape == (2, 3) and feats.values.shape[-2:] == (2, 2)


def test_capture_hook_does_not_change_outputs():
    model = build_model("tiny_vit", seed=1, image_size=32)
    x = torch.randn(3, 3, 32, 32)
    logits, _ = forward_with_capture(model, x)
    assert torch.equal(logits, model(x))


def test_zero_input_is_finite():
    logits, feats = forward_with_capture(build_model("tiny_cnn", seed=0), torch.zeros(1, 3, 64, 64))
    assert torch.isfinite(logits).all() and torch.isfinite(feats.values).all()


def test_unknown_layer():
    with pytest.raises(ConfigError):
        forward_with_capture(build_model("tiny_cnn", seed=0), torch.zeros(1, 3, 32, 32), "nope")


def test_non_finite_activation():
    model = build_model("tiny_cnn", seed=0)
    x = torch.zeros(1, 3, 32, 32)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        forward_with_capture(model, x)


def test_unknown_model_and_bad_images():
    with pytest.raises(ConfigError):
        build_model("resnet")
    with pytest.raises(ShapeError):
        forward_with_capture(build_model("tiny_cnn", seed=0), torch.zeros(1, 1, 32, 32))


def test_select_scalar_modes():
    logits = torch.tensor([[2.0, -1.0, 0.5], [0.1, 3.0, 1.0]])
    out = select_scalar(logits, ScalarTargetSelector.ground_truth([0, 2]))
    assert out.tolist() == [2.0, 1.0]
    assert select_scalar(torch.tensor([[0.7], [-0.3]]), ScalarTargetSelector.value_head()).tolist() == pytest.approx([0.7, -0.3])
    assert select_scalar(logits, ScalarTargetSelector("custom-index", torch.tensor([1, 1]))).tolist() == [-1.0, 3.0]


def test_select_scalar_errors():
    logits = torch.zeros(2, 3)
    with pytest.raises(IndexError):
        select_scalar(logits, ScalarTargetSelector.ground_truth([0, 3]))
    with pytest.raises(ShapeError):
        select_scalar(logits, ScalarTargetSelector.ground_truth([0]))
    with pytest.raises(ConfigError):
        ScalarTargetSelector("ground-truth-logit")
    with pytest.raises(ConfigError):
        ScalarTargetSelector("argmax", torch.tensor([0]))


def test_summed_gradient_is_per_sample_for_independent_samples():
    # sum_b c_b * sum(A_b): gradient of the total at sample b is c_b everywhere
    feats = torch.randn(3, 2, 4, 4, requires_grad=True)
    coef = torch.tensor([1.0, -2.0, 0.5])
    scalars = coef * feats.sum(dim=(1, 2, 3))
    counter = BackwardCounter()
    grads = gradients_for_summed_target(FeatureMapBatch(feats, "x"), scalars, counter=counter)
    assert torch.equal(grads, coef[:, None, None, None].expand_as(feats))
    assert counter.count == 1 and counter.by_tag == {"attention": 1}


def test_gradients_keep_graph_on_request():
    feats = torch.randn(2, 1, 2, 2, requires_grad=True)
    grads = gradients_for_summed_target(feats, (feats**2).sum(dim=(1, 2, 3)), retain_higher_order=True)
    assert torch.allclose(grads, 2 * feats)
    # second-order: d/dA sum(2A) = 2
    (second,) = torch.autograd.grad(grads.sum(), feats)
    assert torch.allclose(second, torch.full_like(feats, 2.0))


def test_detached_features_raise_linkage_error():
    feats = torch.randn(2, 1, 2, 2)
    with pytest.raises(LinkageError):
        gradients_for_summed_target(feats, torch.ones(2, requires_grad=True))
    other = torch.randn(2, 1, 2, 2, requires_grad=True)
    unrelated = torch.randn(2, requires_grad=True)
    with pytest.raises(LinkageError):
        gradients_for_summed_target(other, unrelated * 1.0)


def test_reshape_rules_roundtrip():
    rule = SpatialReshapeRule("drop-leading-token", (2, 3))
    tokens = torch.randn(2, 7, 5)
    spatial = tokens_to_spatial(tokens, rule)
    assert spatial.shape == (2, 5, 2, 3)
    # token 1 + (row * w + col) sits at (row, col)
    assert torch.equal(spatial[:, :, 1, 2], tokens[:, 1 + 5])
    assert torch.equal(spatial_to_tokens(spatial, rule, tokens[:, :1]), tokens)
    ident = SpatialReshapeRule("identity", (2, 3))
    assert torch.equal(spatial_to_tokens(tokens_to_spatial(tokens[:, 1:], ident), ident), tokens[:, 1:])


def test_reshape_rule_errors():
    with pytest.raises(ShapeError):
        tokens_to_spatial(torch.randn(1, 6, 4), SpatialReshapeRule("drop-leading-token", (2, 3)))
    with pytest.raises(ConfigError):
        SpatialReshapeRule("identity")
    with pytest.raises(ConfigError):
        SpatialReshapeRule("transpose", (2, 2))


def test_feature_map_invariants():
    with pytest.raises(ShapeError):
        FeatureMapBatch(torch.zeros(2, 3, 4), "x")
    with pytest.raises(ShapeError):
        FeatureMapBatch(torch.zeros(0, 3, 4, 4), "x")


def test_identity_rule_rejects_leading_token():
    with pytest.raises(ShapeError):
        tokens_to_spatial(torch.randn(1, 5, 3), SpatialReshapeRule("identity", (2, 2)))


def test_gradient_linearity():
    model = build_model("tiny_cnn", seed=0)
    x = torch.randn(3, 3, 32, 32)
    sel = ScalarTargetSelector.ground_truth([0, 1, 2])
    logits, feats = forward_with_capture(model, x)
    g1 = gradients_for_summed_target(feats, select_scalar(logits, sel), retain_graph=True)
    g3 = gradients_for_summed_target(feats, 3.0 * select_scalar(logits, sel))
    assert torch.allclose(g3, 3.0 * g1, atol=1e-6)


def test_last_vit_block_is_not_the_default_capture():
    # after the last block only the class token reaches the head, so patch gradients vanish there
    model = build_model("tiny_vit", seed=0, image_size=32)
    logits, feats = forward_with_capture(model, torch.randn(2, 3, 32, 32), "blocks.1")
    grads = gradients_for_summed_target(feats, logits[:, 0])
    assert torch.count_nonzero(grads) == 0
    assert model.default_capture_layer == "blocks.0"
