import numpy as np
import pytest
import torch

from skyreid.layers import GatedRecurrence, SelfAttention, TransformerBlock
from skyreid.shape import SHAPE_DIM, ShapeBranch, shape_prior_loss


def oracle_gru(module, x):
    """Run the explicit GRU equations in numpy, h_0 = 0."""
    wz = module.update_gate.weight.detach().numpy()
    bz = module.update_gate.bias.detach().numpy()
    wr = module.reset_gate.weight.detach().numpy()
    br = module.reset_gate.bias.detach().numpy()
    wh = module.candidate.weight.detach().numpy()
    bh = module.candidate.bias.detach().numpy()

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    b, t, _ = x.shape
    h = np.zeros((b, module.hidden_dim))
    out = np.zeros((b, t, module.hidden_dim))
    for step in range(t):
        joint = np.concatenate([x[:, step], h], axis=-1)
        z = sigmoid(joint @ wz.T + bz)
        r = sigmoid(joint @ wr.T + br)
        cand = np.tanh(np.concatenate([x[:, step], r * h], axis=-1) @ wh.T + bh)
        h = (1.0 - z) * h + z * cand
        out[:, step] = h
    return out


def test_gated_recurrence_matches_hand_equations(rng):
    torch.manual_seed(0)
    cell = GatedRecurrence(5, 4).double()
    x = rng.standard_normal((3, 6, 5))
    got = cell(torch.from_numpy(x)).detach().numpy()
    want = oracle_gru(cell, x)
    assert np.abs(got - want).max() <= 1e-9


def test_gated_recurrence_single_step_by_hand():
    torch.manual_seed(1)
    cell = GatedRecurrence(3, 2).double()
    x = torch.tensor([[[0.5, -1.0, 2.0]]], dtype=torch.float64)
    got = cell(x)[0, 0].detach().numpy()
    # h_0 = 0: h_1 = z * tanh(W_h [x; 0])
    joint = np.concatenate([x[0, 0].numpy(), np.zeros(2)])
    z = 1.0 / (1.0 + np.exp(-(cell.update_gate.weight.detach().numpy() @ joint + cell.update_gate.bias.detach().numpy())))
    cand = np.tanh(cell.candidate.weight.detach().numpy() @ joint + cell.candidate.bias.detach().numpy())
    assert np.abs(got - z * cand).max() <= 1e-12


def test_gated_recurrence_is_causal(rng):
    torch.manual_seed(2)
    cell = GatedRecurrence(4, 4)
    x = torch.from_numpy(rng.standard_normal((2, 8, 4))).float()
    base = cell(x).detach()
    tampered = x.clone()
    tampered[:, 5:] = 0.0
    out = cell(tampered).detach()
    assert torch.equal(out[:, :5], base[:, :5])


def test_gated_recurrence_validation():
    cell = GatedRecurrence(3, 3)
    with pytest.raises(ValueError):
        cell(torch.zeros(2, 3))


def test_transformer_block_is_permutation_equivariant(rng):
    torch.manual_seed(3)
    block = TransformerBlock(8, 2).double()
    x = torch.from_numpy(rng.standard_normal((2, 7, 8)))
    perm = torch.randperm(7)
    direct = block(x)[:, perm]
    permuted = block(x[:, perm])
    assert torch.allclose(direct, permuted, atol=1e-9)


def test_self_attention_rejects_bad_heads():
    with pytest.raises(ValueError):
        SelfAttention(10, 3)


def test_shape_branch_shapes(rng):
    torch.manual_seed(4)
    branch = ShapeBranch(16, refine_dim=32, refine_depth=2, refine_heads=2, max_frames=8)
    x = torch.from_numpy(rng.standard_normal((3, 6, 16))).float()
    out = branch(x)
    assert out.alpha.shape == (3, 6, SHAPE_DIM)
    assert out.alpha_smooth.shape == (3, 6, SHAPE_DIM)
    assert out.alpha_refined.shape == (3, 6, SHAPE_DIM)
    assert out.f_s.shape == (3, SHAPE_DIM)


def test_descriptor_is_mean_of_refined_codes(rng):
    torch.manual_seed(5)
    branch = ShapeBranch(8, refine_dim=16, refine_depth=1, refine_heads=2, max_frames=8)
    x = torch.from_numpy(rng.standard_normal((2, 5, 8))).float()
    out = branch(x)
    assert torch.allclose(out.f_s, out.alpha_refined.mean(dim=1), atol=1e-7)


def test_smoothing_reduces_temporal_variance():
    # alternating codes: the recurrence must damp the oscillation
    torch.manual_seed(6)
    branch = ShapeBranch(8, refine_dim=16, refine_depth=1, refine_heads=2, max_frames=16)
    sign = torch.tensor([1.0 if t % 2 == 0 else -1.0 for t in range(12)])
    x = sign.view(1, 12, 1) * torch.ones(1, 12, 8)
    out = branch(x)
    raw_var = out.alpha.var(dim=1).mean().item()
    smooth_var = out.alpha_smooth.var(dim=1).mean().item()
    assert smooth_var < raw_var


def test_shape_branch_validation(rng):
    with pytest.raises(ValueError):
        ShapeBranch(1)
    branch = ShapeBranch(8, refine_dim=16, refine_depth=1, refine_heads=2, max_frames=4)
    with pytest.raises(ValueError):
        branch(torch.zeros(1, 5, 8))
    with pytest.raises(ValueError):
        branch(torch.zeros(1, 4, 7))


def test_shape_prior_loss_values():
    assert shape_prior_loss(torch.zeros(3, 4, SHAPE_DIM)).item() == 0.0
    one_hot = torch.zeros(1, 1, SHAPE_DIM)
    one_hot[0, 0, 0] = 1.0
    assert abs(shape_prior_loss(one_hot).item() - 1.0) <= 1e-9


def test_shape_prior_loss_matches_oracle(rng):
    for _ in range(25):
        b = int(rng.integers(1, 5))
        t = int(rng.integers(1, 7))
        alpha = rng.standard_normal((b, t, SHAPE_DIM))
        got = shape_prior_loss(torch.from_numpy(alpha))
        want = (alpha**2).sum(axis=-1).mean()
        assert abs(got.item() - want) <= 1e-6


def test_shape_prior_loss_validation():
    with pytest.raises(ValueError):
        shape_prior_loss(torch.zeros(3, SHAPE_DIM))
