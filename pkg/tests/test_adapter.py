import math

import numpy as np
import pytest
import torch

from cyclelight import adapter


def rand(*shape, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


def softmax_rows_by_hand(logits):
    out = []
    for row in logits:
        m = max(row)
        exps = [math.exp(v - m) for v in row]
        s = sum(exps)
        out.append([e / s for e in exps])
    return out


def two_stage_oracle(z_u, c_i, w_q, w_k, w_v):
    """Brute-force evaluation of the chained attentions with python loops."""
    z_u, c_i = np.asarray(z_u), np.asarray(c_i)
    w_q, w_k, w_v = np.asarray(w_q), np.asarray(w_k), np.asarray(w_v)
    n, d = z_u.shape
    q = c_i @ w_q
    logits1 = [[sum(q[i][k] * z_u[j][k] for k in range(d)) / math.sqrt(d)
                for j in range(n)] for i in range(n)]
    a1 = softmax_rows_by_hand(logits1)
    z_f = [[sum(a1[i][j] * z_u[j][k] for j in range(n)) for k in range(d)] for i in range(n)]
    k_i = c_i @ w_k
    v_i = c_i @ w_v
    logits2 = [[sum(z_f[i][k] * k_i[j][k] for k in range(d)) / math.sqrt(d)
                for j in range(n)] for i in range(n)]
    a2 = softmax_rows_by_hand(logits2)
    z_n = [[sum(a2[i][j] * v_i[j][k] for j in range(n)) for k in range(d)] for i in range(n)]
    return np.array(z_n), np.array(a1), np.array(a2)


# -- text cross-attention -----------------------------------------------------

def test_text_attention_single_key_collapses_to_value():
    z_u = rand(5, 4, seed=1)
    c_t = rand(1, 6, seed=2)
    w_q, w_k, w_v = rand(4, 4, seed=3), rand(6, 4, seed=4), rand(6, 4, seed=5)
    out = adapter.text_cross_attention(z_u, c_t, w_q, w_k, w_v)
    expected = (c_t @ w_v).expand(5, -1)
    assert torch.allclose(out, expected, atol=1e-12)


def test_text_attention_rows_sum_to_one():
    z_u, c_t = rand(7, 4, seed=6), rand(3, 6, seed=7)
    _, weights = adapter.text_cross_attention(
        z_u, c_t, rand(4, 4, seed=8), rand(6, 4, seed=9), rand(6, 4, seed=10),
        return_weights=True,
    )
    assert torch.allclose(weights.sum(dim=-1), torch.ones(7, dtype=torch.float64), atol=1e-5)


def test_text_attention_tiny_hand_case():
    # 2 latent tokens, 2 text tokens, d = 2, identity projections
    z_u = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    c_t = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    eye = torch.eye(2, dtype=torch.float64)
    out = adapter.text_cross_attention(z_u, c_t, eye, eye, eye)
    scale = 1 / math.sqrt(2)
    logits = [[2 * scale, 0.0], [0.0, 2 * scale]]
    a = softmax_rows_by_hand(logits)
    expected = np.array(a) @ c_t.numpy()
    assert np.allclose(out.numpy(), expected, atol=1e-12)


# -- cycle attention ----------------------------------------------------------

def test_cycle_attention_single_token_collapse():
    # one latent and one prompt token: stage-1 softmax is 1 so Z_f = Z_u,
    # stage-2 softmax is 1 so the output is the prompt value projection
    z_u = rand(1, 4, seed=11)
    c_i = rand(1, 3, seed=12)
    w_q, w_k, w_v = rand(3, 4, seed=13), rand(3, 4, seed=14), rand(3, 4, seed=15)
    out = adapter.cycle_attention(z_u, c_i, w_q, w_k, w_v)
    assert torch.allclose(out, c_i @ w_v, atol=1e-12)


def test_cycle_attention_row_stochastic():
    z_u, c_i = rand(6, 4, seed=16), rand(6, 3, seed=17)
    _, (a1, a2) = adapter.cycle_attention(
        z_u, c_i, rand(3, 4, seed=18), rand(3, 4, seed=19), rand(3, 4, seed=20),
        return_weights=True,
    )
    ones = torch.ones(6, dtype=torch.float64)
    assert torch.allclose(a1.sum(dim=-1), ones, atol=1e-5)
    assert torch.allclose(a2.sum(dim=-1), ones, atol=1e-5)


def test_cycle_attention_matches_brute_force_oracle():
    z_u, c_i = rand(3, 4, seed=21), rand(3, 5, seed=22)
    w_q, w_k, w_v = rand(5, 4, seed=23), rand(5, 4, seed=24), rand(5, 4, seed=25)
    out, (a1, a2) = adapter.cycle_attention(z_u, c_i, w_q, w_k, w_v, return_weights=True)
    expected, oracle_a1, oracle_a2 = two_stage_oracle(z_u, c_i, w_q, w_k, w_v)
    assert np.allclose(out.numpy(), expected, atol=1e-6)
    assert np.allclose(a1.numpy(), oracle_a1, atol=1e-6)
    assert np.allclose(a2.numpy(), oracle_a2, atol=1e-6)


def test_cycle_attention_identity_projection_micro_case():
    d = 3
    z_u = torch.tensor([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]], dtype=torch.float64)
    c_i = torch.tensor([[0.5, 0, 0], [0, 0.25, 0], [0, 0, 1.0]], dtype=torch.float64)
    eye = torch.eye(d, dtype=torch.float64)
    out = adapter.cycle_attention(z_u, c_i, eye, eye, eye)
    expected, _, _ = two_stage_oracle(z_u, c_i, eye, eye, eye)
    assert np.allclose(out.numpy(), expected, atol=1e-6)


def test_cycle_attention_rejects_row_count_mismatch():
    with pytest.raises(ValueError):
        adapter.cycle_attention(rand(4, 4), rand(3, 3), rand(3, 4), rand(3, 4), rand(3, 4))


def test_cycle_attention_zero_value_projection_gives_zero():
    z_u, c_i = rand(5, 4, seed=26), rand(5, 3, seed=27)
    out = adapter.cycle_attention(
        z_u, c_i, rand(3, 4, seed=28), rand(3, 4, seed=29),
        torch.zeros(3, 4, dtype=torch.float64),
    )
    assert torch.all(out == 0)


def test_cycle_attention_gradients_match_finite_differences():
    torch.manual_seed(0)
    z_u, c_i = rand(3, 4, seed=30), rand(3, 4, seed=31)
    projections = [rand(4, 4, seed=s).requires_grad_(True) for s in (32, 33, 34)]

    def loss_fn():
        out = adapter.cycle_attention(z_u, c_i, *projections)
        return (out * rand(3, 4, seed=35)).sum()

    loss_fn().backward()
    h = 1e-6
    for proj in projections:
        analytic = proj.grad.clone()
        fd = torch.zeros_like(proj)
        for i in range(proj.shape[0]):
            for j in range(proj.shape[1]):
                with torch.no_grad():
                    proj[i, j] += h
                    up = loss_fn()
                    proj[i, j] -= 2 * h
                    down = loss_fn()
                    proj[i, j] += h
                fd[i, j] = (up - down) / (2 * h)
        rel = (analytic - fd).norm() / fd.norm()
        assert rel < 1e-3


# -- decoupled image-prompt branch ---------------------------------------------

def test_ip_adapter_single_prompt_token():
    z_u = rand(5, 4, seed=36)
    c_i = rand(1, 3, seed=37)
    w_q, w_k, w_v = rand(4, 4, seed=38), rand(3, 4, seed=39), rand(3, 4, seed=40)
    out = adapter.ip_adapter_attention(z_u, c_i, w_q, w_k, w_v)
    assert torch.allclose(out, (c_i @ w_v).expand(5, -1), atol=1e-12)


def test_ip_adapter_row_stochastic():
    _, weights = adapter.ip_adapter_attention(
        rand(6, 4, seed=41), rand(6, 3, seed=42),
        rand(4, 4, seed=43), rand(3, 4, seed=44), rand(3, 4, seed=45),
        return_weights=True,
    )
    assert torch.allclose(weights.sum(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-5)


def test_ip_adapter_differs_from_cycle_attention():
    z_u, c_i = rand(6, 4, seed=46), rand(6, 4, seed=47)
    w_q, w_k, w_v = rand(4, 4, seed=48), rand(4, 4, seed=49), rand(4, 4, seed=50)
    a = adapter.ip_adapter_attention(z_u, c_i, w_q, w_k, w_v)
    b = adapter.cycle_attention(z_u, c_i, w_q, w_k, w_v)
    assert (a - b).abs().max() > 0


# -- combination ----------------------------------------------------------------

def test_decoupled_combine_zero_branch():
    z_t = rand(4, 4, seed=51)
    assert torch.equal(adapter.decoupled_combine(z_t, torch.zeros_like(z_t)), z_t)


def test_decoupled_combine_commutes():
    a, b = rand(4, 4, seed=52), rand(4, 4, seed=53)
    assert torch.equal(adapter.decoupled_combine(a, b), adapter.decoupled_combine(b, a))


def test_decoupled_combine_matches_elementwise_add():
    a, b = rand(5, 3, seed=54), rand(5, 3, seed=55)
    expected = a.numpy() + b.numpy()
    assert np.allclose(adapter.decoupled_combine(a, b).numpy(), expected, atol=1e-12)


def test_decoupled_combine_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adapter.decoupled_combine(rand(4, 4), rand(4, 3))


# -- prompt feature extraction ----------------------------------------------------

def test_extract_constant_map_scales_lift_vector():
    lift = [rand(5, seed=56), rand(5, seed=57)]
    tokens = adapter.extract_image_prompt_features(
        np.full((16, 16), 0.3), [(4, 4), (8, 8)], lift
    )
    assert torch.allclose(tokens[0], 0.3 * lift[0].expand(16, -1), atol=1e-6)
    assert torch.allclose(tokens[1], 0.3 * lift[1].expand(64, -1), atol=1e-6)


def test_extract_token_counts_match_grids():
    lift = [rand(5, seed=58), rand(5, seed=59)]
    tokens = adapter.extract_image_prompt_features(
        np.random.default_rng(0).random((32, 32)), [(2, 2), (4, 4)], lift
    )
    assert tokens[0].shape == (4, 5)
    assert tokens[1].shape == (16, 5)


def test_extract_checkerboard_pools_to_half():
    board = np.indices((8, 8)).sum(axis=0) % 2
    lift = [rand(3, seed=60)]
    tokens = adapter.extract_image_prompt_features(board.astype(float), [(4, 4)], lift)
    assert torch.allclose(tokens[0], 0.5 * lift[0].expand(16, -1), atol=1e-6)


def test_extract_rejects_nondivisible_pooling():
    with pytest.raises(ValueError):
        adapter.extract_image_prompt_features(np.zeros((10, 10)), [(3, 3)], [rand(2)])


# -- site behaviour ---------------------------------------------------------------

def make_site(latent_dim=8, text_dim=6, prompt_dim=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return adapter.AdapterSite(latent_dim, text_dim, prompt_dim, gen)


def test_site_text_only_ignores_prompt_tokens():
    site = make_site()
    z_u = torch.randn(10, 8, generator=torch.Generator().manual_seed(1))
    c_t = torch.randn(3, 6, generator=torch.Generator().manual_seed(2))
    with_zeros = site(z_u, c_t, torch.zeros(10, 4), "text_only")
    with_random = site(z_u, c_t, torch.randn(10, 4), "text_only")
    assert torch.equal(with_zeros, with_random)


@pytest.mark.parametrize("mode", adapter.ADAPTER_MODES)
def test_site_output_shape_matches_text_branch(mode):
    site = make_site()
    z_u = torch.randn(10, 8, generator=torch.Generator().manual_seed(3))
    c_t = torch.randn(4, 6, generator=torch.Generator().manual_seed(4))
    c_i = torch.randn(10, 4, generator=torch.Generator().manual_seed(5))
    out = site(z_u, c_t, c_i, mode)
    assert out.shape == z_u.shape


def test_site_rejects_unknown_mode():
    site = make_site()
    with pytest.raises(ValueError):
        site(torch.zeros(4, 8), torch.zeros(2, 6), torch.zeros(4, 4), "bogus")
