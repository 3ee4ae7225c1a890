"""PPO with generalized advantage estimation for the recurrent policy.

Rollouts store raw (pre-squash) action samples, log probabilities,
values, and the GRU hidden that entered each step.  Updates draw
minibatches of fixed-length step sequences so the recurrent core is
replayed exactly as it ran during collection, with hidden state zeroed
across episode boundaries.  Depth images are quantized to 8 bits both
for acting and for storage, so replayed inputs match collected inputs
bit for bit at a quarter of the memory.
"""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    epochs: int = 10
    minibatch: int = 5120
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    rollout_steps: int = 512
    seq_len: int = 64

    def validate(self, n_envs):
        if self.rollout_steps % self.seq_len:
            raise ValueError("rollout_steps must be a multiple of seq_len")
        if self.minibatch % self.seq_len:
            raise ValueError("minibatch must be a multiple of seq_len")
        batch = self.rollout_steps * n_envs
        if batch % self.minibatch:
            raise ValueError("minibatch must divide the batch size")
        return batch


def lr_schedule(progress, lr_start, lr_end):
    """Linear decay; progress is the fraction of total steps consumed."""
    p = min(max(progress, 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * p


def quantize_depth(depth):
    """8-bit representation of an inverse-depth image in [0, 1]."""
    return np.round(depth * 255.0).astype(np.uint8)


def obs_to_tensors(obs, device="cpu"):
    """Convert an env observation to policy inputs.

    Depth goes through the 8-bit quantizer so that acting, storage, and
    replay all see the identical image.
    """
    state = torch.from_numpy(obs["state"]).to(device)
    depth = None
    if "depth" in obs:
        depth = torch.from_numpy(
            quantize_depth(obs["depth"]).astype(np.float32) / 255.0
        ).to(device)
    return state, depth


class RolloutBuffer:
    """Fixed-size storage for one rollout across all envs."""

    def __init__(self, steps, n_envs, state_dim, depth_shape, action_dim, latent_dim):
        self.steps = steps
        self.n_envs = n_envs
        self.state = np.zeros((steps, n_envs, state_dim), dtype=np.float32)
        self.depth = (
            np.zeros((steps, n_envs) + tuple(depth_shape), dtype=np.uint8)
            if depth_shape
            else None
        )
        self.raw = np.zeros((steps, n_envs, action_dim), dtype=np.float32)
        self.log_prob = np.zeros((steps, n_envs), dtype=np.float32)
        self.value = np.zeros((steps, n_envs), dtype=np.float32)
        self.reward = np.zeros((steps, n_envs), dtype=np.float32)
        self.done = np.zeros((steps, n_envs), dtype=np.float32)
        self.hidden = np.zeros((steps, n_envs, latent_dim), dtype=np.float32)
        self.advantage = np.zeros((steps, n_envs), dtype=np.float64)
        self.returns = np.zeros((steps, n_envs), dtype=np.float64)

    def compute_gae(self, bootstrap_value, gamma, lam):
        """Backward recursion per env stream, cut at episode ends; the
        value of the observation after the last step bootstraps streams
        that were still running.  Accumulates in double precision so the
        recursion matches the defining discounted sums to roundoff."""
        last = np.zeros(self.n_envs, dtype=np.float64)
        next_value = bootstrap_value.astype(np.float64)
        for t in reversed(range(self.steps)):
            nonterminal = 1.0 - self.done[t].astype(np.float64)
            delta = (
                self.reward[t] + gamma * next_value * nonterminal - self.value[t]
            )
            last = delta + gamma * lam * nonterminal * last
            self.advantage[t] = last
            next_value = self.value[t].astype(np.float64)
        self.returns = self.advantage + self.value

    def normalized_advantage(self):
        a = self.advantage
        return ((a - a.mean()) / (a.std() + 1e-8)).astype(np.float32)


def collect(env, policy, obs, hidden, steps, generator, device="cpu"):
    """Run the policy for a fixed number of steps across all envs.

    Returns the filled buffer, episode records, reward-term sums, the
    final observation, the final hidden state, and the bootstrap value.
    """
    cfg = policy.config
    depth_shape = cfg.depth_shape if cfg.use_depth else None
    buffer = RolloutBuffer(
        steps, env.n_envs, cfg.state_dim, depth_shape, cfg.action_dim, cfg.latent_dim
    )
    records = []
    term_sums = {}
    policy.eval()
    for t in range(steps):
        state_t, depth_t = obs_to_tensors(obs, device)
        out = policy.act(state_t, depth_t, hidden, generator=generator)
        action = out["action"].cpu().numpy().astype(float)
        buffer.state[t] = obs["state"]
        if buffer.depth is not None:
            buffer.depth[t] = quantize_depth(obs["depth"])
        buffer.hidden[t] = hidden.cpu().numpy()
        buffer.raw[t] = out["raw"].cpu().numpy()
        buffer.log_prob[t] = out["log_prob"].cpu().numpy()
        buffer.value[t] = out["value"].cpu().numpy()
        obs, reward, done, reason, info = env.step(action)
        buffer.reward[t] = reward
        buffer.done[t] = done.astype(np.float32)
        records.extend(info["episodes"])
        for name, vals in info["breakdown"].as_dict().items():
            term_sums[name] = term_sums.get(name, 0.0) + float(np.sum(vals))
        hidden = out["hidden"]
        if done.any():
            hidden = hidden * torch.from_numpy(
                (~done).astype(np.float32)
            ).unsqueeze(-1)
    state_t, depth_t = obs_to_tensors(obs, device)
    with torch.no_grad():
        _, bootstrap, _ = policy.forward(state_t, depth_t, hidden)
    return buffer, records, term_sums, obs, hidden, bootstrap.cpu().numpy()


def sequence_loss(policy, batch, config):
    """Clipped PPO objective over a minibatch of fixed-length sequences.

    ``batch`` maps names to tensors shaped (m, L, ...): ``state``,
    optional ``depth``, raw actions ``raw``, ``old_logp``, ``done``,
    ``returns``, and ``advantage``, plus ``hidden`` of shape (m, H)
    holding the recurrent state that entered each sequence.  The core
    is replayed step by step with the hidden state zeroed across
    episode boundaries, exactly as during collection.  Returns the
    scalar training loss and a dict of float diagnostics.
    """
    state = batch["state"]
    m, L = state.shape[0], state.shape[1]
    depth = batch.get("depth")
    flat_depth = (
        depth.reshape(m * L, *depth.shape[2:]) if depth is not None else None
    )
    feats = policy.features(state.reshape(m * L, -1), flat_depth).reshape(m, L, -1)
    h = batch["hidden"]
    done = batch["done"]
    latents = []
    for l in range(L):
        if l > 0:
            h = h * (1.0 - done[:, l - 1]).unsqueeze(-1)
        latent, h = policy.advance(feats[:, l], h)
        latents.append(latent)
    latent = torch.stack(latents, dim=1).reshape(m * L, -1)
    mean = policy.actor(latent)
    value = policy.critic(latent).squeeze(-1)
    logp = policy.log_prob(mean, batch["raw"].reshape(m * L, -1))

    old_logp = batch["old_logp"].reshape(-1)
    adv = batch["advantage"].reshape(-1)
    ret = batch["returns"].reshape(-1)
    ratio = torch.exp(logp - old_logp)
    surrogate = torch.minimum(
        ratio * adv,
        torch.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv,
    )
    policy_loss = -surrogate.mean()
    value_loss = torch.nn.functional.mse_loss(value, ret)
    entropy = policy.entropy()
    loss = (
        policy_loss
        + config.value_coef * value_loss
        - config.entropy_coef * entropy
    )
    with torch.no_grad():
        diagnostics = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float(((ratio - 1.0) - torch.log(ratio)).mean()),
            "clip_frac": float(
                ((ratio - 1.0).abs() > config.clip).float().mean()
            ),
        }
    return loss, diagnostics


def ppo_update(policy, optimizer, buffer, config, lr, generator, device="cpu"):
    """One PPO update over the rollout; returns averaged diagnostics."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    policy.train()
    steps, n_envs = buffer.steps, buffer.n_envs
    L = config.seq_len
    chunks_per_env = steps // L
    n_seq = n_envs * chunks_per_env
    seq_per_mb = config.minibatch // L

    state = torch.from_numpy(buffer.state)
    raw = torch.from_numpy(buffer.raw)
    old_logp = torch.from_numpy(buffer.log_prob)
    done = torch.from_numpy(buffer.done)
    hidden0 = torch.from_numpy(buffer.hidden)
    returns = torch.from_numpy(buffer.returns.astype(np.float32))
    advantage = torch.from_numpy(buffer.normalized_advantage())

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "approx_kl": 0.0, "clip_frac": 0.0}
    n_batches = 0
    for _ in range(config.epochs):
        order = torch.randperm(n_seq, generator=generator)
        for start in range(0, n_seq, seq_per_mb):
            seq_ids = order[start : start + seq_per_mb]
            env_ids = torch.div(seq_ids, chunks_per_env, rounding_mode="floor")
            t0 = (seq_ids % chunks_per_env) * L
            # Gather (m, L, ...) sequence slabs.
            t_idx = t0[:, None] + torch.arange(L)
            batch = {
                "state": state[t_idx, env_ids[:, None]].to(device),
                "raw": raw[t_idx, env_ids[:, None]].to(device),
                "old_logp": old_logp[t_idx, env_ids[:, None]].to(device),
                "done": done[t_idx, env_ids[:, None]].to(device),
                "returns": returns[t_idx, env_ids[:, None]].to(device),
                "advantage": advantage[t_idx, env_ids[:, None]].to(device),
                "hidden": hidden0[t0, env_ids].to(device),
            }
            if buffer.depth is not None:
                batch["depth"] = (
                    torch.from_numpy(
                        buffer.depth[
                            t_idx.numpy(), env_ids[:, None].numpy()
                        ].astype(np.float32)
                    )
                    / 255.0
                ).to(device)

            loss, diagnostics = sequence_loss(policy, batch, config)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()

            for name, val in diagnostics.items():
                stats[name] += val
            n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in stats.items()}
