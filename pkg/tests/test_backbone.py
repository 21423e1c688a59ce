from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from diveseg.backbone import (
    AquaStyleAligner,
    FrozenViT,
    ViTConfig,
    aligner_param_count,
    load_backbone_weights,
    save_backbone_weights,
)
from diveseg.model import DiveSeg, count_parameters, module_sizes, trainable_parameters

from conftest import finite_difference_check, randomize_, tiny_model_config
from make_fixtures import golden_backbone_blocks
from oracles import gelu, layer_norm, naive_mha

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = dict(num_layers=4, embed_dim=8, num_heads=2, patch_size=4, image_size=16)


def np_(t):
    return t.detach().double().numpy()


def small_vit(seed=0, **kw):
    torch.manual_seed(seed)
    return FrozenViT(ViTConfig(**{**SMALL, **kw}))


def small_aligners(seed=1, dim=8, style_dim=6):
    torch.manual_seed(seed)
    return torch.nn.ModuleList(AquaStyleAligner(dim, 2, style_dim) for _ in range(4))


# --- partition


def test_aligned_layers_for_twelve():
    cfg = ViTConfig()
    assert [i + 1 for i in cfg.aligned_layers()] == [1, 4, 7, 10]


@given(st.integers(1, 16))
def test_block_partition_total_and_balanced(k):
    cfg = ViTConfig(num_layers=4 * k)
    owners = [cfg.block_of(i) for i in range(cfg.num_layers)]
    assert sorted(set(owners)) == [0, 1, 2, 3]
    assert all(owners.count(b) == k for b in range(4))
    assert owners == sorted(owners)  # contiguous
    assert cfg.aligned_layers() == [owners.index(b) for b in range(4)]


@pytest.mark.parametrize("layers", [0, 6, 13])
def test_bad_layer_count(layers):
    with pytest.raises(ValueError):
        ViTConfig(num_layers=layers)


def test_image_not_divisible_by_patch():
    with pytest.raises(ValueError):
        ViTConfig(image_size=100, patch_size=16)
    vit = small_vit()
    with pytest.raises(ValueError):
        vit(torch.zeros(1, 3, 18, 18))


# --- aligner, attention sublayer


def test_zero_init_mha_is_frozen_mha():
    vit = small_vit()
    aligner = small_aligners()[0]
    tokens = torch.randn(2, 17, 8)
    style = torch.randn(2, 6)
    layer = vit.blocks[0]
    assert torch.equal(aligner.inject_mha(layer, tokens, style, 1), layer.mha(tokens))
    assert torch.equal(aligner.inject_ff(layer, tokens, 1), layer.ff(tokens))


def test_same_style_same_output():
    vit = small_vit()
    aligner = small_aligners()[0]
    randomize_(aligner, 3)
    tokens, style = torch.randn(1, 17, 8), torch.randn(1, 6)
    a = aligner.inject_mha(vit.blocks[0], tokens, style, 1)
    b = aligner.inject_mha(vit.blocks[0], tokens, style.clone(), 1)
    assert torch.equal(a, b)


def test_style_dim_mismatch():
    vit = small_vit()
    aligner = small_aligners()[0]
    with pytest.raises(ValueError):
        aligner.inject_mha(vit.blocks[0], torch.randn(1, 17, 8), torch.randn(1, 7), 1)


def frozen_mha_oracle(layer, x):
    ln = layer_norm(x, np_(layer.norm1.weight), np_(layer.norm1.bias), layer.norm1.eps)
    w, b = np_(layer.attn.qkv.weight), np_(layer.attn.qkv.bias)
    d = x.shape[-1]
    out = naive_mha(
        ln, ln, w[:d], b[:d], w[d : 2 * d], b[d : 2 * d], w[2 * d :], b[2 * d :],
        np_(layer.attn.proj.weight), np_(layer.attn.proj.bias), layer.attn.num_heads,
    )
    return x + out


def test_mha_injection_matches_naive_attention():
    vit = small_vit()
    layer = vit.blocks[0]
    aligner = small_aligners()[0]
    randomize_(aligner, 4)
    torch.manual_seed(9)
    tokens = torch.randn(1, 5, 8)  # one prefix token + 4 patch tokens
    style = torch.randn(1, 6)
    got = np_(aligner.inject_mha(layer, tokens, style, num_prefix=1))[0]

    x = np_(tokens)[0]
    s = np_(style)[0]
    mlp = aligner.style_mlp
    hidden = gelu(s @ np_(mlp.fc1.weight).T + np_(mlp.fc1.bias))
    kv = (hidden @ np_(mlp.fc2.weight).T + np_(mlp.fc2.bias)).reshape(4, 8)
    ca = aligner.cross_attn
    patches = layer_norm(x[1:], np_(layer.norm1.weight), np_(layer.norm1.bias), layer.norm1.eps)
    cross = naive_mha(
        patches, kv,
        np_(ca.q_proj.weight), np_(ca.q_proj.bias), np_(ca.k_proj.weight), np_(ca.k_proj.bias),
        np_(ca.v_proj.weight), np_(ca.v_proj.bias), np_(ca.out_proj.weight), np_(ca.out_proj.bias), 2,
    )
    expected = frozen_mha_oracle(layer, x)
    expected[1:] += cross
    np.testing.assert_allclose(got, expected, atol=1e-6)


# --- aligner, feed-forward sublayer


def test_zero_input_zero_bias_bottleneck():
    aligner = small_aligners()[0]
    randomize_(aligner, 2)
    torch.nn.init.zeros_(aligner.down.bias)
    torch.nn.init.zeros_(aligner.up.bias)
    assert torch.count_nonzero(aligner.bottleneck(torch.zeros(1, 4, 8))) == 0


def test_ff_injection_matches_matmul_oracle():
    vit = small_vit()
    layer = vit.blocks[1]
    aligner = small_aligners()[0]
    randomize_(aligner, 5)
    omega1 = torch.randn(1, 5, 8)
    got = np_(aligner.inject_ff(layer, omega1, num_prefix=1))[0]

    x = np_(omega1)[0]
    ln = layer_norm(x, np_(layer.norm2.weight), np_(layer.norm2.bias), layer.norm2.eps)
    ff = gelu(ln @ np_(layer.mlp.fc1.weight).T + np_(layer.mlp.fc1.bias)) @ np_(layer.mlp.fc2.weight).T
    ff += np_(layer.mlp.fc2.bias)
    adapter = gelu(x @ np_(aligner.down.weight).T + np_(aligner.down.bias)) @ np_(aligner.up.weight).T
    adapter += np_(aligner.up.bias)
    expected = x + ff
    expected[1:] += adapter[1:]
    np.testing.assert_allclose(got, expected, atol=1e-6)


# --- backbone forward


def test_zero_init_aligners_leave_blocks_unchanged():
    vit = small_vit()
    aligners = small_aligners()
    images = torch.randn(2, 3, 16, 16)
    plain = vit(images)
    aligned = vit(images, aligners, torch.randn(2, 6))
    assert len(plain) == 4
    for a, b in zip(plain, aligned):
        assert a.shape == (2, 16, 8)
        assert torch.max(torch.abs(a - b)) <= 1e-6


def test_randomized_aligners_change_blocks():
    vit = small_vit()
    aligners = small_aligners()
    randomize_(aligners, 1)
    images = torch.randn(1, 3, 16, 16)
    assert not torch.allclose(vit(images)[0], vit(images, aligners, torch.randn(1, 6))[0])


def test_golden_backbone_outputs():
    # regenerate with: python tests/make_fixtures.py
    golden = np.load(FIXTURES / "backbone_blocks_golden.npy")
    got = golden_backbone_blocks()
    assert got.shape == (4, 1, 16, 192)
    np.testing.assert_allclose(got, golden, atol=1e-5)


# --- trainable set and frozen contract


def test_trainable_set_excludes_backbone():
    model = DiveSeg(tiny_model_config(), seed=0)
    names = [n for n, _ in trainable_parameters(model)]
    assert names and not any(n.startswith("backbone.") for n in names)
    total = count_parameters(model.named_parameters())
    backbone = count_parameters(model.backbone.named_parameters())
    assert count_parameters(trainable_parameters(model)) == total - backbone


def test_optimizer_step_leaves_backbone_bit_identical():
    model = DiveSeg(tiny_model_config(), seed=0)
    snapshot = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    params = [p for _, p in trainable_parameters(model)]
    opt = torch.optim.AdamW(params, lr=1e-2, weight_decay=0.05)
    out = model(torch.rand(2, 3, 32, 32))
    loss = out.prediction.mask_logits.square().mean() + out.prediction.class_logits.square().mean()
    loss.backward()
    opt.step()
    assert all(p.grad is None for p in model.backbone.parameters())
    for k, v in model.backbone.state_dict().items():
        assert torch.equal(v, snapshot[k]), k


def test_aligner_parameter_count_closed_form():
    cfg = tiny_model_config(use_prompter=False)
    model = DiveSeg(cfg)
    per = aligner_param_count(cfg.embed_dim, cfg.style_dim, cfg.style_tokens, cfg.bottleneck_ratio)
    assert count_parameters(model.aligners.named_parameters()) == 4 * per
    assert per == module_sizes(cfg)["aligner"]
    baseline = DiveSeg(tiny_model_config(use_prompter=False, use_aligner=False))
    delta = count_parameters(trainable_parameters(model)) - count_parameters(trainable_parameters(baseline))
    assert delta == 4 * per + module_sizes(cfg)["style_encoder"]


def test_default_aligner_size():
    # 192-dim tokens, 256-dim style vector, 4 style tokens, ratio 4
    d, s = 192, 256
    expected = (s * d + d) + (d * 4 * d + 4 * d) + 4 * (d * d + d) + (d * 48 + 48) + (48 * d + d)
    assert aligner_param_count(d, s) == expected == 364464


def test_aligner_gradients_match_finite_differences():
    torch.manual_seed(0)
    vit = small_vit().double()
    aligner = AquaStyleAligner(8, 2, 6).double()
    randomize_(aligner, 7)
    tokens = torch.randn(1, 5, 8, dtype=torch.float64)
    style = torch.randn(1, 6, dtype=torch.float64)
    target = torch.randn(1, 5, 8, dtype=torch.float64)

    def loss():
        return ((aligner(vit.blocks[0], tokens, style, 1) - target) ** 2).sum()

    finite_difference_check(loss, list(aligner.parameters()))


# --- external weights


def test_weight_file_round_trip(tmp_path):
    src = small_vit(seed=3)
    path = tmp_path / "w.npz"
    save_backbone_weights(src, path)
    dst = small_vit(seed=4)
    load_backbone_weights(dst, path)
    for k, v in src.state_dict().items():
        assert torch.equal(v, dst.state_dict()[k])
    assert not any(p.requires_grad for p in dst.parameters())


def test_weight_file_ignores_heads(tmp_path):
    src = small_vit()
    state = {k: v.numpy() for k, v in src.state_dict().items()}
    state["head.weight"] = np.zeros((10, 8), np.float32)
    np.savez(tmp_path / "w.npz", **state)
    load_backbone_weights(small_vit(seed=1), tmp_path / "w.npz")


@pytest.mark.parametrize("problem", ["missing", "shape", "extra"])
def test_weight_file_rejects_incompatible(tmp_path, problem):
    state = {k: v.numpy() for k, v in small_vit().state_dict().items()}
    if problem == "missing":
        del state["blocks.0.attn.qkv.weight"]
    elif problem == "shape":
        state["pos_embed"] = np.zeros((1, 5, 8), np.float32)
    else:
        state["blocks.9.attn.qkv.weight"] = np.zeros((24, 8), np.float32)
    np.savez(tmp_path / "w.npz", **state)
    with pytest.raises(ValueError, match="incompatible"):
        load_backbone_weights(small_vit(), tmp_path / "w.npz")


def test_torch_weight_file(tmp_path):
    src = small_vit(seed=2)
    torch.save(src.state_dict(), tmp_path / "w.pt")
    dst = small_vit(seed=5)
    load_backbone_weights(dst, tmp_path / "w.pt")
    assert torch.equal(dst.pos_embed, src.pos_embed)


def test_external_source_in_model(tmp_path):
    cfg = tiny_model_config()
    donor = DiveSeg(cfg, seed=11)
    save_backbone_weights(donor.backbone, tmp_path / "w.npz")
    model = DiveSeg(tiny_model_config(pretrained_source="external-weights-file", weights_file=str(tmp_path / "w.npz")))
    assert torch.equal(model.backbone.pos_embed, donor.backbone.pos_embed)
