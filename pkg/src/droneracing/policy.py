"""Recurrent actor-critic policy over state and depth observations.

Two encoder branches (an MLP for the 17-d state vector, a small conv
net for the inverse-depth image) feed a GRU whose latent drives separate
actor and critic MLP heads.  The actor outputs the mean of a diagonal
Gaussian in an unbounded pre-command space; samples are squashed through
tanh onto the physical command box (non-negative collective thrust,
symmetric body rates), with the matching log-density correction.  The
standard deviation is a learned, state-independent parameter.
"""

import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

LOG2 = math.log(2.0)


@dataclass
class PolicyConfig:
    state_dim: int = 17
    action_dim: int = 4
    use_depth: bool = True
    recurrent: bool = True
    depth_shape: tuple = (64, 64)
    state_layers: tuple = (96, 96)
    depth_channels: tuple = (8, 16, 32)
    depth_feature: int = 128
    latent_dim: int = 256
    head_layers: tuple = (192, 96)
    log_std_init: float = -0.5
    thrust_max: float = 14.0 / 0.58
    omega_max: float = 6.0
    # Fixed input normalization, one gain per state entry.
    state_scale: tuple = field(
        default_factory=lambda: (0.2,) * 6 + (0.2,) * 3 + (0.2,) + (1.0,) * 4 + (1 / 3,) * 3
    )

    def to_dict(self):
        d = asdict(self)
        for key in ("depth_shape", "state_layers", "depth_channels", "head_layers",
                    "state_scale"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("depth_shape", "state_layers", "depth_channels", "head_layers",
                    "state_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _orthogonal(module, gain):
    nn.init.orthogonal_(module.weight, gain=gain)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


def _mlp(sizes, out_gain, relu_out=False):
    layers = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        gain = out_gain if last and not relu_out else math.sqrt(2.0)
        layers.append(_orthogonal(nn.Linear(sizes[i], sizes[i + 1]), gain))
        if not last or relu_out:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or PolicyConfig()
        cfg = self.config
        self.register_buffer(
            "state_scale", torch.tensor(cfg.state_scale, dtype=torch.float32)
        )
        self.state_encoder = _mlp(
            (cfg.state_dim,) + tuple(cfg.state_layers), math.sqrt(2.0), relu_out=True
        )
        feat_dim = cfg.state_layers[-1]
        if cfg.use_depth:
            convs = []
            in_ch = 1
            rows, cols = cfg.depth_shape
            for out_ch in cfg.depth_channels:
                convs.append(
                    _orthogonal(
                        nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                        math.sqrt(2.0),
                    )
                )
                convs.append(nn.ReLU())
                in_ch = out_ch
                rows, cols = (rows + 1) // 2, (cols + 1) // 2
            self.depth_encoder = nn.Sequential(*convs)
            flat = in_ch * rows * cols
            self.depth_proj = nn.Sequential(
                _orthogonal(nn.Linear(flat, cfg.depth_feature), math.sqrt(2.0)),
                nn.ReLU(),
            )
            feat_dim += cfg.depth_feature
        if cfg.recurrent:
            self.core = nn.GRUCell(feat_dim, cfg.latent_dim)
            nn.init.orthogonal_(self.core.weight_hh)
            nn.init.orthogonal_(self.core.weight_ih, gain=math.sqrt(2.0))
            nn.init.zeros_(self.core.bias_ih)
            nn.init.zeros_(self.core.bias_hh)
        else:
            self.core = nn.Sequential(
                _orthogonal(nn.Linear(feat_dim, cfg.latent_dim), math.sqrt(2.0)),
                nn.ReLU(),
            )
        head_in = (cfg.latent_dim,) + tuple(cfg.head_layers)
        self.actor = _mlp(head_in + (cfg.action_dim,), 0.01)
        self.critic = _mlp(head_in + (1,), 1.0)
        self.log_std = nn.Parameter(
            torch.full((cfg.action_dim,), float(cfg.log_std_init))
        )

    # -- plumbing -------------------------------------------------------

    def initial_hidden(self, batch):
        return torch.zeros(batch, self.config.latent_dim)

    def features(self, state, depth=None):
        x = self.state_encoder(state * self.state_scale)
        if self.config.use_depth:
            if depth is None:
                raise ValueError("policy was built with a depth branch")
            z = self.depth_encoder(depth.unsqueeze(1))
            z = self.depth_proj(z.flatten(1))
            x = torch.cat([x, z], dim=-1)
        return x

    def advance(self, feat, hidden):
        """One latent update; hidden passes through unchanged when the
        core is feedforward."""
        if self.config.recurrent:
            h = self.core(feat, hidden)
            return h, h
        return self.core(feat), hidden

    def forward(self, state, depth=None, hidden=None):
        if hidden is None:
            hidden = self.initial_hidden(state.shape[0]).to(state.device)
        latent, new_hidden = self.advance(self.features(state, depth), hidden)
        mean = self.actor(latent)
        value = self.critic(latent).squeeze(-1)
        return mean, value, new_hidden

    # -- squashed-Gaussian action space -----------------------------------

    def squash(self, raw):
        """Map unbounded pre-commands onto the physical command box."""
        thrust = 0.5 * (torch.tanh(raw[..., :1]) + 1.0) * self.config.thrust_max
        rates = torch.tanh(raw[..., 1:]) * self.config.omega_max
        return torch.cat([thrust, rates], dim=-1)

    def log_prob(self, mean, raw):
        """Log density of the squashed action that raw maps to."""
        std = self.log_std.exp()
        gauss = -0.5 * (((raw - mean) / std) ** 2 + 2 * self.log_std + math.log(2 * math.pi))
        # log(1 - tanh^2(x)) evaluated stably.
        log_dtanh = 2.0 * (LOG2 - raw - torch.nn.functional.softplus(-2.0 * raw))
        scale = math.log(self.config.thrust_max / 2.0) + 3.0 * math.log(
            self.config.omega_max
        )
        return gauss.sum(-1) - log_dtanh.sum(-1) - scale

    def entropy(self):
        """Entropy of the pre-squash Gaussian (exploration pressure)."""
        return (self.log_std + 0.5 * math.log(2 * math.pi * math.e)).sum()

    @torch.no_grad()
    def act(self, state, depth=None, hidden=None, generator=None, deterministic=False):
        """Sample (or take the mean of) the action distribution.

        Returns physical actions plus everything PPO needs to replay the
        decision: the raw sample, its log probability, the value, and
        the next hidden state.
        """
        mean, value, new_hidden = self.forward(state, depth, hidden)
        if deterministic:
            raw = mean
        else:
            noise = torch.empty_like(mean).normal_(generator=generator)
            raw = mean + noise * self.log_std.exp()
        action = self.squash(raw)
        logp = self.log_prob(mean, raw)
        return {
            "action": action,
            "raw": raw,
            "log_prob": logp,
            "value": value,
            "hidden": new_hidden,
        }
