import math

import numpy as np
import pytest
import torch
from oracles import gradcheck_error as _gradcheck

from hsi_fewshot.network import (
    CrossAttentionLayer,
    CrossAttentionStack,
    DomainDiscriminator,
    FeatureExtractor,
    Mapper,
    ModelConfig,
    MultiLevelModel,
    attention_weights,
    extractor_output_shape,
    read_archive,
    write_archive,
)
from hsi_fewshot.sampling import PatchBatch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_mapper_shape_ip():
    mapper = Mapper(200, 100)
    out = mapper(torch.randn(3, 9, 9, 200))
    assert out.shape == (3, 100, 9, 9)


def test_mapper_identity():
    mapper = Mapper(6, 6).eval()
    with torch.no_grad():
        mapper.conv.weight.copy_(torch.eye(6).view(6, 6, 1, 1))
        mapper.conv.bias.zero_()
    mapper.bn.eps = 0.0
    x = torch.randn(7, 9, 9, 6)
    torch.testing.assert_close(mapper(x), x.permute(0, 3, 1, 2))


def test_mapper_preserves_order():
    mapper = Mapper(4, 5).eval()
    x = torch.randn(7, 3, 3, 4)
    full = mapper(x)
    assert full.shape[0] == 7
    for i in range(7):
        torch.testing.assert_close(full[i], mapper(x[i:i + 1])[0])


def test_mapper_band_mismatch():
    with pytest.raises(ValueError, match="band-count mismatch"):
        Mapper(200, 100)(torch.randn(1, 9, 9, 103))


def test_extractor_output_160_and_trace():
    ext = FeatureExtractor(100, 9).eval()
    trace = []
    out = ext(torch.randn(2, 100, 9, 9), trace=trace)
    assert out.shape == (2, 160)
    assert trace == [(8, 25, 5, 5), (16, 7, 3, 3), (32, 5, 1, 1)]
    assert extractor_output_shape(100, 9) == (32, 5, 1, 1)


def test_extractor_single_patch():
    assert FeatureExtractor(100, 9).eval()(torch.randn(1, 100, 9, 9)).shape == (1, 160)


def test_extractor_zero_patch():
    ext = FeatureExtractor(100, 9).eval()
    with torch.no_grad():
        for m in ext.modules():
            if getattr(m, "bias", None) is not None and isinstance(m, (torch.nn.Conv3d,)):
                m.bias.zero_()
    out = ext(torch.zeros(3, 100, 9, 9))
    torch.testing.assert_close(out, torch.zeros(3, 160))


def test_extractor_wrong_spatial_size():
    with pytest.raises(ValueError):
        FeatureExtractor(100, 9)(torch.randn(1, 100, 7, 7))
    with pytest.raises(ValueError):
        extractor_output_shape(20, 9)


def test_extractor_deterministic_eval():
    ext = FeatureExtractor(40, 9).eval()
    x = torch.randn(4, 40, 9, 9)
    assert torch.equal(ext(x), ext(x))


def test_attention_weights_closed_form():
    keys = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    w = attention_weights(keys[0], keys, 1)
    e = math.e
    torch.testing.assert_close(w, torch.tensor([e / (1 + e), 1 / (1 + e)], dtype=torch.float64))
    assert abs(w[0].item() - 0.731) < 5e-4 and abs(w[1].item() - 0.269) < 5e-4


def test_attention_weights_identical_keys_uniform():
    keys = torch.ones(5, 3)
    torch.testing.assert_close(attention_weights(torch.randn(4, 3), keys, 3), torch.full((4, 5), 0.2))


def test_attention_weights_shift_invariance():
    q = torch.randn(4, dtype=torch.float64)
    k = torch.randn(6, 4, dtype=torch.float64)
    # translating every key by v adds the constant q.v to all scores
    v = torch.randn(4, dtype=torch.float64) * 5
    torch.testing.assert_close(attention_weights(q, k + v, 4), attention_weights(q, k, 4))


def test_attention_rows_are_distributions():
    w = attention_weights(torch.randn(10, 8), torch.randn(7, 8), 8)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(10), atol=1e-6, rtol=0)


def test_cross_attention_identical_support():
    layer = CrossAttentionLayer(16, 4).eval()
    support = torch.randn(1, 16).repeat(5, 1)
    q = torch.randn(3, 16)
    # the layer's attention sub-layer, before residual and normalization
    attended, weights = super(CrossAttentionLayer, layer).forward(q, support, return_weights=True)
    torch.testing.assert_close(weights, torch.full_like(weights, 0.2))
    torch.testing.assert_close(attended, attended[:1].expand_as(attended))


def test_cross_attention_single_support():
    layer = CrossAttentionLayer(16, 4)
    _, weights = super(CrossAttentionLayer, layer).forward(torch.randn(6, 16), torch.randn(1, 16),
                                                           return_weights=True)
    assert torch.equal(weights, torch.ones_like(weights))


def test_cross_attend_support_permutation_invariant():
    stack = CrossAttentionStack(160, 8, 2).eval()
    q, s = torch.randn(9, 160), torch.randn(7, 160)
    perm = torch.randperm(7)
    torch.testing.assert_close(stack(q, s), stack(q, s[perm]), atol=1e-5, rtol=0)


def test_cross_attend_query_equivariant():
    stack = CrossAttentionStack(160, 8, 2).eval()
    q, s = torch.randn(9, 160), torch.randn(7, 160)
    perm = torch.randperm(9)
    torch.testing.assert_close(stack(q, s)[perm], stack(q[perm], s), atol=1e-5, rtol=0)


def test_cross_attend_empty_support():
    with pytest.raises(ValueError):
        CrossAttentionStack(16, 4, 1)(torch.randn(2, 16), torch.randn(0, 16))


def test_heads_must_divide():
    with pytest.raises(ValueError):
        CrossAttentionStack(160, 7)


def test_discriminator_shapes():
    d = DomainDiscriminator(160, 16, mode="features_only")
    assert d(torch.randn(4, 160)).shape == (4,)
    cond = DomainDiscriminator(160, 16, mode="conditional")
    assert cond.in_features == 2560
    assert cond.hidden.in_features == 2560
    probs = torch.softmax(torch.randn(4, 16), 1)
    assert cond(torch.randn(4, 160), probs).shape == (4,)
    with pytest.raises(ValueError):
        cond(torch.randn(4, 160))


def test_gradient_reversal_sign_and_scale():
    d = DomainDiscriminator(8, 2, mode="features_only", dropout=0.0).eval()
    x = torch.randn(5, 8, requires_grad=True)
    d(x, coefficient=1.0).sum().backward()
    reversed_grad = x.grad.clone()
    x.grad = None
    d(x, coefficient=-1.0).sum().backward()  # -1 undoes the reversal
    torch.testing.assert_close(reversed_grad, -x.grad)
    x.grad = None
    d(x, coefficient=0.5).sum().backward()
    torch.testing.assert_close(x.grad, 0.5 * reversed_grad)


def test_zero_reversal_blocks_feature_gradient():
    mapper = Mapper(4, 4)
    d = DomainDiscriminator(4 * 9, 2, mode="features_only")
    feats = mapper(torch.randn(3, 3, 3, 4)).flatten(1)
    d(feats, coefficient=0.0).sum().backward()
    assert all(torch.count_nonzero(p.grad) == 0 for p in mapper.parameters())
    assert any(torch.count_nonzero(p.grad) > 0 for p in d.parameters())


def test_gradcheck_attention_layer():
    layer = CrossAttentionLayer(16, 4).double()
    s = torch.randn(5, 16, dtype=torch.float64)
    w = torch.randn(3, 16, dtype=torch.float64)
    q = torch.randn(3, 16, dtype=torch.float64)
    assert _gradcheck(lambda v: (layer(v, s) * w).sum(), q) < 1e-3
    assert _gradcheck(lambda v: (layer(q, v) * w).sum(), s) < 1e-3


def test_gradcheck_mapper_and_extractor():
    torch.manual_seed(1)
    model = MultiLevelModel(ModelConfig(source_bands=5, target_bands=5, mapped_bands=36, ways=2,
                                        disc_hidden=16)).double().eval()
    x = torch.rand(2, 9, 9, 5, dtype=torch.float64)
    w = torch.randn(2, model.feature_dim, dtype=torch.float64)
    coords = np.random.default_rng(0).choice(x.numel(), 25, replace=False).tolist()
    assert _gradcheck(lambda v: (model.embed(v, "source") * w).sum(), x, coords) < 1e-3


def test_gradcheck_discriminator():
    d = DomainDiscriminator(6, 3, mode="conditional", hidden=10, dropout=0.0).double()
    probs = torch.softmax(torch.randn(4, 3, dtype=torch.float64), 1)
    x = torch.randn(4, 6, dtype=torch.float64)
    # reversal coefficient -1 restores the plain gradient for the check
    assert _gradcheck(lambda v: d(v, probs, coefficient=-1.0).sum(), x) < 1e-3


def test_parameter_names_follow_scheme():
    model = MultiLevelModel(ModelConfig(source_bands=5, target_bands=7, mapped_bands=36, ways=3))
    names = set(model.state_dict())
    assert "extractor.block1.conv1.weight" in names
    assert any(n.startswith("mapper.source.") for n in names)
    assert any(n.startswith("mapper.target.") for n in names)
    assert any(n.startswith("attention.layer0.head_proj.") for n in names)
    assert any(n.startswith("attention.layer1.head_proj.") for n in names)
    assert any(n.startswith("discriminator.") for n in names)


def test_initialization():
    model = MultiLevelModel(ModelConfig(source_bands=5, target_bands=7, mapped_bands=36, ways=3))
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            if ".bn" in name or "norm" in name:
                assert torch.count_nonzero(p) == 0
            else:
                assert torch.count_nonzero(p) == 0, name
        elif ".bn" in name or "norm" in name:
            assert torch.all(p == 1), name


def test_embed_uses_domain_mapper():
    model = MultiLevelModel(ModelConfig(source_bands=5, target_bands=7, mapped_bands=36, ways=3)).eval()
    batch = PatchBatch(np.random.rand(2, 9, 9, 7), [0, 1], "target")
    assert model.embed(batch).shape == (2, model.feature_dim)
    with pytest.raises(ValueError):
        model.embed(batch, "source")


def test_archive_round_trip(tmp_path):
    model = MultiLevelModel(ModelConfig(source_bands=5, target_bands=7, mapped_bands=36, ways=3))
    tensors = dict(model.state_dict())
    tensors["rng.torch"] = torch.get_rng_state()
    write_archive(tmp_path / "a.ckpt", tensors, {"step": 3})
    back, meta = read_archive(tmp_path / "a.ckpt")
    assert meta == {"step": 3}
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v.numpy())
    assert back["mapper.source.conv.weight"].dtype == np.dtype("<f4")
    assert back["rng.torch"].dtype == np.uint8
    write_archive(tmp_path / "b.ckpt", tensors, {"step": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
