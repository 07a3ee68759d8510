"""Noise schedules and the deterministic DDIM updates."""

import numpy as np
import pytest

from rendact.diffusion import (
    ActionChunk,
    ActionNormalizer,
    NoiseSchedule,
    add_noise,
    ddim_step_actions,
    ddim_step_points,
    make_schedule,
    subsample_steps,
)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("steps", [1, 4, 50, 1000])
def test_schedule_invariants(kind, steps):
    s = make_schedule(kind, steps)
    ab = s.alpha_bar
    assert ab.shape == (steps + 1,)
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all(ab > 0)
    assert np.all(s.betas > 0) and np.all(s.betas <= 0.999)


def test_schedule_endpoints_nearly_pure_noise():
    # At the stated training length the terminal signal level is tiny.
    assert make_schedule("cosine", 50).alpha_bar[-1] < 0.01
    assert make_schedule("linear", 1000).alpha_bar[-1] < 0.01
    # The short linear ramp intentionally is not: beta only reaches 0.02.
    assert make_schedule("linear", 50).alpha_bar[-1] > 0.5


def test_cosine_beta_clip():
    s = make_schedule("cosine", 1000)
    assert s.betas.max() == 0.999


def test_alpha_bar_is_cumprod_of_betas():
    for kind in ("cosine", "linear"):
        s = make_schedule(kind, 50)
        ref = np.concatenate([[1.0], np.cumprod(1.0 - s.betas)])
        assert np.abs(s.alpha_bar - ref).max() < 1e-15


def test_add_noise_identity_at_zero():
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(8, 6))
    eps = rng.normal(size=(8, 6))
    assert np.array_equal(add_noise(x0, eps, s, 0), x0)


def test_add_noise_moments():
    # Monte-Carlo check of Var[x_k] = alpha_bar + (1 - alpha_bar) for x0
    # fixed at zero / eps standard normal.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(1)
    k = 25
    eps = rng.standard_normal((200_000, 1))
    xk = add_noise(np.zeros((200_000, 1)), eps, s, k)
    var = xk.var()
    assert abs(var - (1.0 - s.alpha_bar[k])) < 5e-3
    # with x0 = 0 the sample is exactly sqrt(1-ab) * eps
    corr = (xk * eps).mean() / np.sqrt(1.0 - s.alpha_bar[k])
    assert abs(corr - 1.0) < 5e-3


def test_subsample_steps_pinned():
    assert subsample_steps(50, 4).tolist() == [50, 37, 25, 12, 0]
    assert subsample_steps(50, 1).tolist() == [50, 0]
    assert subsample_steps(50, 50).tolist() == list(range(50, -1, -1))
    with pytest.raises(ValueError):
        subsample_steps(50, 0)
    with pytest.raises(ValueError):
        subsample_steps(50, 51)


def test_ddim_exact_noise_estimate_recovers_x0():
    # With the oracle eps the single jump k -> 0 inverts add_noise.
    rng = np.random.default_rng(2)
    for kind in ("cosine", "linear"):
        s = make_schedule(kind, 50)
        x0 = rng.normal(size=(8, 6))
        eps = rng.normal(size=(8, 6))
        for k in (1, 12, 50):
            xk = add_noise(x0, eps, s, k)
            eps_hat = (xk - np.sqrt(s.alpha_bar[k]) * x0) / np.sqrt(
                1.0 - s.alpha_bar[k]
            )
            back = ddim_step_actions(xk, eps_hat, s, k, 0)
            assert np.abs(back - x0).max() < 1e-11


def test_ddim_chain_with_oracle_eps_matches_single_jump():
    # The DDIM update is consistent: with a fixed (x0, eps) pair the chain
    # through intermediate steps lands where the direct jump does.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 6))
    eps = rng.normal(size=(4, 6))
    x = add_noise(x0, eps, s, 50)
    for k, k_prev in zip([50, 37, 25, 12], [37, 25, 12, 0]):
        eps_hat = (x - np.sqrt(s.alpha_bar[k]) * x0) / np.sqrt(1.0 - s.alpha_bar[k])
        x = ddim_step_actions(x, eps_hat, s, k, k_prev)
    assert np.abs(x - x0).max() < 1e-10


def test_ddim_step_guards():
    s = make_schedule("cosine", 50)
    x = np.zeros((2, 6))
    with pytest.raises(ValueError):
        ddim_step_actions(x, x, s, 10, 10)
    with pytest.raises(ValueError):
        ddim_step_actions(x, x, s, 10, 20)
    with pytest.raises(ValueError):
        ddim_step_actions(x, x, s, 51, 0)


def test_ddim_clip_inactive_is_bit_exact():
    # A bound wider than every clean estimate must not change one bit.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 6))
    eps_hat = rng.normal(size=(8, 6))
    for k, k_prev in ((50, 37), (12, 0)):
        a = ddim_step_actions(x, eps_hat, s, k, k_prev)
        b = ddim_step_actions(x, eps_hat, s, k, k_prev, x0_clip=1e6)
        assert a.tobytes() == b.tobytes()


def test_ddim_clip_bounds_final_estimate():
    # At k = 50 the clean estimate divides by sqrt(alpha_bar) ~ 1e-3, so a
    # slightly wrong noise estimate explodes it; the bound caps the jump.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(12)
    x0 = rng.normal(size=(4, 6))
    eps = rng.normal(size=(4, 6))
    xk = add_noise(x0, eps, s, 50)
    eps_bad = eps + 0.1
    ab = s.alpha_bar[50]
    x0_hat = (xk - np.sqrt(1.0 - ab) * eps_bad) / np.sqrt(ab)
    assert np.abs(x0_hat).max() > 50.0
    out = ddim_step_actions(xk, eps_bad, s, 50, 0, x0_clip=2.0)
    # the final step returns the clean estimate itself, so here the
    # bound is exact
    assert np.array_equal(out, np.clip(x0_hat, -2.0, 2.0))


def test_ddim_clip_recomputes_consistent_noise():
    # When the bound engages mid-chain the step must stay consistent with
    # x_k: the noise term is re-derived from the clipped estimate.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(13)
    xk = rng.normal(size=(4, 6))
    eps_bad = rng.normal(size=(4, 6)) * 3.0
    ab_k, ab_p = s.alpha_bar[50], s.alpha_bar[37]
    x0_hat = np.clip((xk - np.sqrt(1.0 - ab_k) * eps_bad) / np.sqrt(ab_k),
                     -2.0, 2.0)
    eps_imp = (xk - np.sqrt(ab_k) * x0_hat) / np.sqrt(1.0 - ab_k)
    expect = np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_imp
    out = ddim_step_actions(xk, eps_bad, s, 50, 37, x0_clip=2.0)
    assert np.abs(out - expect).max() < 1e-12


def test_ddim_points_final_step_is_bit_exact():
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(40, 3))
    flow = 0.05 * rng.normal(size=(40, 3))
    out = ddim_step_points(pts, flow, s, 12, 0, 0.3)
    assert np.array_equal(out, pts + flow)


def test_ddim_points_blend_moves_toward_targets():
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(40, 3)) * 0.1
    flow = 0.05 * rng.normal(size=(40, 3))
    out = ddim_step_points(pts, flow, s, 25, 12, 0.3)
    d_before = np.linalg.norm(flow)
    d_after = np.linalg.norm(pts + flow - out)
    assert 0.0 < d_after < d_before


def test_ddim_points_centroid_invariance():
    # The blend happens in a centred frame, so translating both the cloud
    # and its targets translates the output identically.
    s = make_schedule("cosine", 50)
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(30, 3)) * 0.1
    flow = 0.05 * rng.normal(size=(30, 3))
    shift = np.array([1.5, -2.0, 0.7])
    a = ddim_step_points(pts, flow, s, 37, 25, 0.3)
    b = ddim_step_points(pts + shift, flow, s, 37, 25, 0.3)
    assert np.abs((b - shift) - a).max() < 1e-12


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule("quadratic", 50)
    with pytest.raises(ValueError):
        make_schedule("cosine", 0)
    with pytest.raises(ValueError):
        # alpha_bar[0] must be exactly 1
        NoiseSchedule("linear", 1, np.array([0.5]), np.array([0.9, 0.45]))
    with pytest.raises(ValueError):
        # strictly decreasing
        NoiseSchedule("linear", 2, np.array([0.0, 0.5]), np.array([1.0, 1.0, 0.5]))


def test_action_chunk():
    twists = np.zeros((8, 6))
    flags = np.zeros(8, dtype=bool)
    c = ActionChunk(twists, flags)
    assert c.horizon == 8
    with pytest.raises(ValueError):
        ActionChunk(np.zeros((8, 5)), flags)
    with pytest.raises(ValueError):
        ActionChunk(twists, np.zeros(7, dtype=bool))


def test_normalizer_round_trip_and_floor():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(200, 6)) * np.array([0.05, 0.05, 0.0, 0.0, 0.0, 0.3])
    n = ActionNormalizer.from_twists(data)
    x = rng.normal(size=(8, 6))
    assert np.abs(n.denormalize(n.normalize(x)) - x).max() < 1e-12
    assert n.std.min() >= 1e-4  # degenerate dimensions get the floor
    z = n.normalize(data)
    assert abs(z[:, 0].std() - 1.0) < 0.1  # active dims roughly unit scale


def test_normalizer_state_round_trip():
    rng = np.random.default_rng(8)
    n = ActionNormalizer.from_twists(rng.normal(size=(50, 6)))
    m = ActionNormalizer.from_state(n.state())
    assert np.array_equal(n.mean, m.mean) and np.array_equal(n.std, m.std)
