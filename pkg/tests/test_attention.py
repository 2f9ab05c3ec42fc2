import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmguide.attention import DualAttention, default_reduction
from mmguide.backbone import init_weights

from fd import check_module_grads


def make(channels, seed=0, gamma=0.0, beta=0.0, dtype=torch.float32):
    torch.manual_seed(seed)
    block = DualAttention(channels).to(dtype)
    init_weights(block)
    with torch.no_grad():
        block.gamma.fill_(gamma)
        block.beta.fill_(beta)
    return block


def test_reduction_rule():
    assert default_reduction(64) == 8
    assert default_reduction(16) == 8
    assert default_reduction(8) == 2
    assert DualAttention(512).query.out_channels == 64


def test_reduction_must_divide_channels():
    with pytest.raises(ValueError):
        DualAttention(6, reduction=4)
    with pytest.raises(ValueError):
        DualAttention(3)


def test_zero_gates_are_identity():
    block = make(8)
    x = torch.randn(2, 8, 3, 4, 5)
    torch.testing.assert_close(block(x), x)
    torch.testing.assert_close(block.spatial_attention(x), x)
    torch.testing.assert_close(block.slice_attention(x), x)


def test_single_position_spatial_term_is_value_projection():
    block = make(4, seed=1, gamma=0.7)
    x = torch.randn(2, 4, 3, 1, 1)
    torch.testing.assert_close(block.spatial_attention(x), 0.7 * block.value(x) + x)


def test_single_slice_attention_scales_input():
    block = make(4, beta=0.3)
    x = torch.randn(1, 4, 1, 3, 3)
    torch.testing.assert_close(block.slice_attention(x), 1.3 * x)


def test_identical_slices_share_weight_evenly():
    block = make(4)
    sl = torch.randn(1, 4, 1, 2, 2)
    a = block.slice_weights(torch.cat([sl, sl], dim=2))
    torch.testing.assert_close(a, torch.full((1, 2, 2), 0.5))


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from([2, 4, 8, 16]),
    st.integers(1, 2),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 10_000),
)
def test_weights_are_row_stochastic(c, n, d, h, w, seed):
    block = make(c, seed=seed % 7)
    x = torch.randn(n, c, d, h, w, generator=torch.Generator().manual_seed(seed))
    for a, size in ((block.spatial_weights(x), h * w), (block.slice_weights(x), d)):
        assert a.shape[-2:] == (size, size)
        assert (a >= 0).all()
        torch.testing.assert_close(a.sum(-1), torch.ones(a.shape[:-1]), atol=1e-5, rtol=0)
    out = make(c, seed=seed % 7, gamma=0.5, beta=-0.2)(x)
    assert out.shape == x.shape


def test_slice_permutation_equivariance():
    block = make(4, seed=2, gamma=0.4, beta=0.9)
    x = torch.randn(1, 4, 5, 2, 3)
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(block(x[:, :, perm]), block(x)[:, :, perm], atol=1e-5, rtol=1e-5)


def test_spatial_permutation_equivariance():
    block = make(4, seed=3, gamma=0.8)
    x = torch.randn(1, 4, 2, 3, 3)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
    shuffle = lambda t: t.flatten(3)[..., perm].reshape(t.shape)
    torch.testing.assert_close(block.spatial_attention(shuffle(x)), shuffle(block.spatial_attention(x)), atol=1e-5, rtol=1e-5)


def test_wrong_channels_rejected():
    with pytest.raises(ValueError):
        make(4)(torch.zeros(1, 8, 2, 2, 2))


def test_gradients_match_finite_differences():
    block = make(2, seed=4, gamma=0.6, beta=-0.4, dtype=torch.float64)
    x = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)

    def loss():
        return (block(x) ** 2).sum() * 0.5 + block(x)[0, 0].sum()

    worst = check_module_grads(loss, [("input", x)] + list(block.named_parameters()))
    assert max(worst.values()) < 1e-4, worst
