"""PPO machinery: GAE, rollout collection, sequence replay, updates."""

import numpy as np
import pytest
import torch

import droneracing.trainer as trainer
from droneracing.env import RacingEnv
from droneracing.policy import ActorCritic, PolicyConfig
from droneracing.trainer import (
    PPOConfig,
    RolloutBuffer,
    collect,
    lr_schedule,
    obs_to_tensors,
    ppo_update,
    quantize_depth,
    sequence_loss,
)
from droneracing.world import Scene, load_track

STATE_POLICY = PolicyConfig(
    state_dim=17,
    action_dim=4,
    use_depth=False,
    recurrent=True,
    state_layers=(16, 16),
    latent_dim=12,
    head_layers=(10, 8),
)


def small_policy(seed=0, **over):
    torch.manual_seed(seed)
    return ActorCritic(PolicyConfig(**{**STATE_POLICY.__dict__, **over}))


def small_env(n=4, seed=0, **kwargs):
    scene = Scene(load_track("mini"), [], seed=0, density=0)
    kwargs.setdefault("use_depth", False)
    return RacingEnv([scene] * n, seed=seed, **kwargs)


def reference_gae(reward, value, done, bootstrap, gamma, lam):
    """Advantages from the defining discounted sums, one (t, env) at a
    time: A_t = sum_k (gamma*lam)^k delta_{t+k}, stopping at episode ends."""
    steps, n_envs = reward.shape
    adv = np.zeros((steps, n_envs), dtype=np.float64)
    values = np.concatenate([value, bootstrap[None]], axis=0).astype(np.float64)
    for e in range(n_envs):
        for t in range(steps):
            acc = 0.0
            scale = 1.0
            for k in range(t, steps):
                nonterminal = 1.0 - done[k, e]
                delta = (
                    reward[k, e]
                    + gamma * values[k + 1, e] * nonterminal
                    - values[k, e]
                )
                acc += scale * delta
                if done[k, e]:
                    break
                scale *= gamma * lam
            adv[t, e] = acc
    return adv


def random_buffer(rng, steps=12, n_envs=3, done_p=0.15):
    buf = RolloutBuffer(steps, n_envs, 2, None, 1, 2)
    buf.reward = rng.normal(size=(steps, n_envs)).astype(np.float32)
    buf.value = rng.normal(size=(steps, n_envs)).astype(np.float32)
    buf.done = (rng.uniform(size=(steps, n_envs)) < done_p).astype(np.float32)
    return buf


# -- GAE -----------------------------------------------------------------------


def test_gae_matches_discounted_sum_oracle():
    rng = np.random.default_rng(0)
    for trial in range(100):
        steps = int(rng.integers(2, 16))
        n_envs = int(rng.integers(1, 5))
        buf = random_buffer(rng, steps, n_envs)
        bootstrap = rng.normal(size=n_envs)
        gamma = float(rng.uniform(0.9, 0.999))
        lam = float(rng.uniform(0.8, 1.0))
        buf.compute_gae(bootstrap, gamma, lam)
        expected = reference_gae(
            buf.reward, buf.value, buf.done, bootstrap, gamma, lam
        )
        assert np.allclose(buf.advantage, expected, atol=1e-9), trial
        assert np.allclose(
            buf.returns, expected + buf.value.astype(np.float64), atol=1e-9
        )


def test_gae_bootstrap_only_for_running_streams():
    buf = RolloutBuffer(1, 2, 2, None, 1, 2)
    buf.reward[:] = [[1.0, 1.0]]
    buf.value[:] = [[0.5, 0.5]]
    buf.done[:] = [[0.0, 1.0]]
    buf.compute_gae(np.array([2.0, 2.0]), gamma=0.9, lam=0.9)
    assert np.isclose(buf.advantage[0, 0], 1.0 + 0.9 * 2.0 - 0.5)
    assert np.isclose(buf.advantage[0, 1], 1.0 - 0.5)  # terminal: no bootstrap


def test_gae_lambda_limits():
    rng = np.random.default_rng(1)
    buf = random_buffer(rng, steps=8, n_envs=2, done_p=0.0)
    bootstrap = rng.normal(size=2)
    # lambda = 0 reduces to the one-step TD residual.
    buf.compute_gae(bootstrap, gamma=0.95, lam=0.0)
    values = np.concatenate([buf.value, bootstrap[None]], axis=0)
    td = buf.reward + 0.95 * values[1:] - values[:-1]
    assert np.allclose(buf.advantage, td, atol=1e-9)
    # lambda = 1 telescopes into discounted-return minus value.
    buf.compute_gae(bootstrap, gamma=0.95, lam=1.0)
    ret = values[-1]
    expected = np.zeros_like(buf.reward, dtype=np.float64)
    for t in reversed(range(8)):
        ret = buf.reward[t] + 0.95 * ret
        expected[t] = ret - buf.value[t]
    assert np.allclose(buf.advantage, expected, atol=1e-9)


def test_normalized_advantage_is_standardized_float32():
    rng = np.random.default_rng(2)
    buf = random_buffer(rng, steps=10, n_envs=4)
    buf.compute_gae(rng.normal(size=4), 0.99, 0.95)
    norm = buf.normalized_advantage()
    assert norm.dtype == np.float32
    assert abs(norm.mean()) < 1e-6
    assert abs(norm.std() - 1.0) < 1e-3


# -- schedule and quantization ---------------------------------------------------


def test_lr_schedule_endpoints_and_clamps():
    assert lr_schedule(0.0, 3e-4, 3e-5) == 3e-4
    assert np.isclose(lr_schedule(1.0, 3e-4, 3e-5), 3e-5, rtol=1e-12)
    assert np.isclose(lr_schedule(0.5, 4e-4, 2e-4), 3e-4)
    assert lr_schedule(-0.3, 3e-4, 3e-5) == 3e-4
    assert np.isclose(lr_schedule(1.7, 3e-4, 3e-5), 3e-5, rtol=1e-12)


def test_quantize_depth_round_trip():
    depth = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    q = quantize_depth(depth)
    assert q.dtype == np.uint8
    assert q[0, 0] == 0 and q[-1, -1] == 255
    # Quantization is idempotent across the act/store/replay path.
    replay = q.astype(np.float32) / 255.0
    assert np.array_equal(quantize_depth(replay), q)


def test_obs_to_tensors_quantizes_depth():
    obs = {
        "state": np.ones((2, 3), dtype=np.float32),
        "depth": np.full((2, 4, 4), 0.5001, dtype=np.float32),
    }
    state, depth = obs_to_tensors(obs)
    assert state.dtype == torch.float32
    expected = np.round(0.5001 * 255) / 255.0
    assert torch.allclose(depth, torch.full((2, 4, 4), float(expected)))
    state_only, none_depth = obs_to_tensors({"state": obs["state"]})
    assert none_depth is None


# -- collection -------------------------------------------------------------------


def test_collect_stores_prestep_quantities():
    env = small_env(n=3, seed=4)
    policy = small_policy()
    obs = env.reset()
    hidden = policy.initial_hidden(3)
    g = torch.Generator().manual_seed(0)
    steps = 6
    buffer, records, term_sums, final_obs, final_hidden, bootstrap = collect(
        env, policy, obs, hidden, steps, g
    )
    assert buffer.state.shape == (steps, 3, 17)
    assert buffer.depth is None
    assert np.array_equal(buffer.state[0], obs["state"])
    assert bootstrap.shape == (3,)
    assert final_obs["state"].shape == (3, 17)
    # Replaying the stored stream through the policy reproduces the stored
    # log probabilities and values step by step.
    h = policy.initial_hidden(3)
    for t in range(steps):
        state_t = torch.from_numpy(buffer.state[t])
        mean, value, h = policy(state_t, None, h)
        logp = policy.log_prob(mean, torch.from_numpy(buffer.raw[t]))
        assert np.allclose(logp.detach().numpy(), buffer.log_prob[t], atol=1e-5)
        assert np.allclose(value.detach().numpy(), buffer.value[t], atol=1e-5)
        h = h * torch.from_numpy(1.0 - buffer.done[t]).unsqueeze(-1)
    assert torch.allclose(h, final_hidden, atol=1e-6)
    # Reward-term sums cover every configured term.
    assert set(term_sums) == {
        "prog", "theta", "cmd", "vd", "avoid", "pass", "crash", "total"
    }


def test_collect_zeroes_hidden_at_episode_boundaries():
    env = small_env(n=2, seed=1, max_steps=3)  # guaranteed terminations
    policy = small_policy()
    obs = env.reset()
    g = torch.Generator().manual_seed(1)
    buffer, records, *_ = collect(env, policy, obs, policy.initial_hidden(2), 7, g)
    assert buffer.done.sum() > 0
    assert len(records) >= 2
    done_steps = np.argwhere(buffer.done[:-1] > 0)
    assert len(done_steps) > 0
    for t, e in done_steps:
        # The hidden entering the step after a termination is zero.
        assert np.allclose(buffer.hidden[t + 1, e], 0.0)


def test_collect_records_match_env_episodes():
    env = small_env(n=2, seed=2, max_steps=4)
    policy = small_policy()
    obs = env.reset()
    g = torch.Generator().manual_seed(2)
    buffer, records, *_ = collect(env, policy, obs, policy.initial_hidden(2), 8, g)
    assert all(r["reason"] in ("timeout", "crash", "lap_complete", "divergence")
               for r in records)
    assert int(buffer.done.sum()) == len(records)


# -- sequence loss -----------------------------------------------------------------


def make_batch(policy, env_count=2, L=4, seed=5):
    env = small_env(n=env_count, seed=seed)
    obs = env.reset()
    g = torch.Generator().manual_seed(seed)
    buffer, *_, bootstrap = collect(
        env, policy, obs, policy.initial_hidden(env_count), L, g
    )
    buffer.compute_gae(bootstrap, 0.99, 0.95)
    batch = {
        "state": torch.from_numpy(buffer.state).transpose(0, 1),
        "raw": torch.from_numpy(buffer.raw).transpose(0, 1),
        "old_logp": torch.from_numpy(buffer.log_prob).transpose(0, 1),
        "done": torch.from_numpy(buffer.done).transpose(0, 1),
        "returns": torch.from_numpy(buffer.returns.astype(np.float32)).transpose(0, 1),
        "advantage": torch.from_numpy(buffer.normalized_advantage()).transpose(0, 1),
        "hidden": torch.from_numpy(buffer.hidden[0]),
    }
    return batch


def test_sequence_loss_first_epoch_ratios_are_one():
    policy = small_policy(seed=3)
    batch = make_batch(policy)
    loss, diag = sequence_loss(policy, batch, PPOConfig())
    assert diag["clip_frac"] == 0.0
    assert abs(diag["approx_kl"]) < 1e-9
    # policy_loss equals -mean(advantage) when every ratio is 1.
    assert np.isclose(
        diag["policy_loss"], -batch["advantage"].mean().item(), atol=1e-5
    )


def test_sequence_loss_replays_recurrence_with_done_masking():
    policy = small_policy(seed=4)
    env = small_env(n=2, seed=6, max_steps=3)  # forces dones inside the window
    obs = env.reset()
    g = torch.Generator().manual_seed(6)
    buffer, *_, bootstrap = collect(env, policy, obs, policy.initial_hidden(2), 6, g)
    assert buffer.done[:-1].sum() > 0
    buffer.compute_gae(bootstrap, 0.99, 0.95)
    batch = {
        "state": torch.from_numpy(buffer.state).transpose(0, 1),
        "raw": torch.from_numpy(buffer.raw).transpose(0, 1),
        "old_logp": torch.from_numpy(buffer.log_prob).transpose(0, 1),
        "done": torch.from_numpy(buffer.done).transpose(0, 1),
        "returns": torch.from_numpy(buffer.returns.astype(np.float32)).transpose(0, 1),
        "advantage": torch.from_numpy(buffer.normalized_advantage()).transpose(0, 1),
        "hidden": torch.from_numpy(buffer.hidden[0]),
    }
    loss, diag = sequence_loss(policy, batch, PPOConfig())
    # Replay through episode boundaries still reproduces collection exactly.
    assert diag["clip_frac"] == 0.0
    assert abs(diag["approx_kl"]) < 1e-9


def test_sequence_loss_penalizes_clipped_movement():
    policy = small_policy(seed=5)
    batch = make_batch(policy)
    config = PPOConfig()
    # Shift the stored log-probs to fake a displaced old policy.
    batch["old_logp"] = batch["old_logp"] - 0.5
    loss, diag = sequence_loss(policy, batch, config)
    assert diag["clip_frac"] > 0.5  # ratios e^0.5 ≈ 1.65 all clip
    assert diag["approx_kl"] > 0.01


def test_sequence_loss_gradients_flow_everywhere():
    policy = small_policy(seed=6)
    batch = make_batch(policy)
    loss, _ = sequence_loss(policy, batch, PPOConfig())
    loss.backward()
    for name, p in policy.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
    # The entropy bonus alone moves log_std.
    assert policy.log_std.grad.abs().sum() > 0


# -- full update -------------------------------------------------------------------


def test_ppo_config_validation():
    cfg = PPOConfig(rollout_steps=32, seq_len=8, minibatch=16)
    assert cfg.validate(4) == 128
    with pytest.raises(ValueError):
        PPOConfig(rollout_steps=30, seq_len=8, minibatch=16).validate(4)
    with pytest.raises(ValueError):
        PPOConfig(rollout_steps=32, seq_len=8, minibatch=12).validate(4)
    with pytest.raises(ValueError):
        PPOConfig(rollout_steps=32, seq_len=8, minibatch=48).validate(5)


def test_ppo_update_covers_every_sequence_each_epoch(monkeypatch):
    policy = small_policy(seed=7)
    env = small_env(n=4, seed=8)
    obs = env.reset()
    g = torch.Generator().manual_seed(8)
    config = PPOConfig(
        rollout_steps=8, seq_len=4, minibatch=8, epochs=3,
        lr_start=0.0, lr_end=0.0,
    )
    buffer, *_, bootstrap = collect(env, policy, obs, policy.initial_hidden(4), 8, g)
    buffer.compute_gae(bootstrap, config.gamma, config.gae_lambda)

    seen = []
    original = trainer.sequence_loss

    def spy(policy_, batch, config_):
        seen.append(batch["state"].shape[0])
        return original(policy_, batch, config_)

    monkeypatch.setattr(trainer, "sequence_loss", spy)
    optimizer = torch.optim.Adam(policy.parameters())
    stats = ppo_update(
        policy, optimizer, buffer, config, lr=0.0,
        generator=torch.Generator().manual_seed(0),
    )
    # 8 sequences of length 4, 2 per minibatch, 4 minibatches per epoch.
    assert seen == [2] * 12
    for key in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac"):
        assert key in stats


def test_ppo_update_sets_learning_rate_and_improves_surrogate():
    policy = small_policy(seed=9)
    env = small_env(n=4, seed=9)
    obs = env.reset()
    g = torch.Generator().manual_seed(9)
    config = PPOConfig(rollout_steps=8, seq_len=4, minibatch=16, epochs=4)
    buffer, *_, bootstrap = collect(env, policy, obs, policy.initial_hidden(4), 8, g)
    buffer.compute_gae(bootstrap, config.gamma, config.gae_lambda)
    optimizer = torch.optim.Adam(policy.parameters())
    before = [p.detach().clone() for p in policy.parameters()]
    stats = ppo_update(
        policy, optimizer, buffer, config, lr=2.5e-4,
        generator=torch.Generator().manual_seed(1),
    )
    assert optimizer.param_groups[0]["lr"] == 2.5e-4
    assert any(
        not torch.equal(b, p.detach()) for b, p in zip(before, policy.parameters())
    )
    assert np.isfinite(stats["policy_loss"])


def test_ppo_update_deterministic_given_generators():
    def run():
        policy = small_policy(seed=10)
        env = small_env(n=2, seed=10)
        obs = env.reset()
        config = PPOConfig(rollout_steps=8, seq_len=4, minibatch=8, epochs=2)
        buffer, *_, bootstrap = collect(
            env, policy, obs, policy.initial_hidden(2),
            8, torch.Generator().manual_seed(2),
        )
        buffer.compute_gae(bootstrap, config.gamma, config.gae_lambda)
        optimizer = torch.optim.Adam(policy.parameters())
        ppo_update(policy, optimizer, buffer, config, 1e-4,
                   torch.Generator().manual_seed(3))
        return torch.cat([p.detach().reshape(-1) for p in policy.parameters()])

    assert torch.equal(run(), run())


def test_collect_and_update_with_depth():
    torch.manual_seed(11)
    policy = ActorCritic(PolicyConfig(
        state_dim=17, use_depth=True, depth_shape=(8, 8),
        depth_channels=(2, 3), depth_feature=6,
        state_layers=(8, 8), latent_dim=8, head_layers=(8, 6),
    ))
    from droneracing.perception import CameraModel

    scene = Scene(load_track("mini"), [], seed=0, density=0)
    env = RacingEnv(
        [scene] * 2, use_depth=True,
        camera=CameraModel(width=8, height=8), seed=12,
    )
    obs = env.reset()
    g = torch.Generator().manual_seed(4)
    config = PPOConfig(rollout_steps=4, seq_len=4, minibatch=4, epochs=1)
    buffer, *_, bootstrap = collect(env, policy, obs, policy.initial_hidden(2), 4, g)
    assert buffer.depth.dtype == np.uint8
    buffer.compute_gae(bootstrap, config.gamma, config.gae_lambda)
    optimizer = torch.optim.Adam(policy.parameters())
    stats = ppo_update(policy, optimizer, buffer, config, 1e-4,
                       torch.Generator().manual_seed(5))
    # Quantized replay matches collection: first-epoch ratios stay 1.
    assert stats["clip_frac"] == 0.0
    assert abs(stats["approx_kl"]) < 1e-7
