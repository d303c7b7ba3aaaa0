"""Entropy-regularized soft actor-critic, from scratch on numpy.

Networks are small dense maps with tanh hidden units and hand-written
backprop in double precision, so every gradient can be checked against
central finite differences.  The policy is a squashed Gaussian: a Gaussian
in pre-activation space pushed through tanh, with the log-density corrected
by the change of variables.  Twin critics with soft-updated target copies
supply the clipped bootstrap value.

The loss functions are pure given an explicit noise draw, which keeps
updates reproducible and finite-difference-checkable:

    critic target  y = r + gamma * (1 - done) * (min Q'_i(s', a') - alpha * log pi(a'|s'))
    critic loss    mean (Q_i(s, a) - y)^2, summed over the twin heads
    actor loss     mean (alpha * log pi(a~|s) - min Q_i(s, a~))

with a' and a~ freshly sampled (reparameterized) from the current policy.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))

REWARD_SCALE = 0.001
REWARD_SHARPNESS = 300.0


def reward(p_goal, p_cube, scale: float = REWARD_SCALE,
           sharpness: float = REWARD_SHARPNESS) -> float:
    """Tracking reward: scale * exp(-sharpness * ||p_goal - p_cube||^2)."""
    d = np.asarray(p_goal, dtype=np.float64) - np.asarray(p_cube, dtype=np.float64)
    sq = float(d @ d)
    if not np.isfinite(sq):
        raise ValueError("non-finite positions in reward")
    return scale * float(np.exp(-sharpness * sq))


# ---------------------------------------------------------------------------
# dense network with manual backprop
# ---------------------------------------------------------------------------

class Mlp:
    """Plain fully-connected net, tanh hidden activations, linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None,
                 out_scale: float = 1.0):
        self.sizes = list(sizes)
        self.W = []
        self.b = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((n_out, n_in))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
                if i == len(sizes) - 2:
                    w *= out_scale
            self.W.append(w)
            self.b.append(np.zeros(n_out))

    def forward(self, x):
        """Returns (output, cache) for a (B, d_in) batch."""
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        for i in range(len(self.W) - 1):
            h = np.tanh(h @ self.W[i].T + self.b[i])
            acts.append(h)
        out = h @ self.W[-1].T + self.b[-1]
        return out, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout):
        """Gradients of sum(dout * out) w.r.t. params and the input."""
        acts = cache
        grads_W = [None] * len(self.W)
        grads_b = [None] * len(self.b)
        delta = np.asarray(dout, dtype=np.float64)
        for i in range(len(self.W) - 1, -1, -1):
            grads_W[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.W[i]) * (1.0 - acts[i] ** 2)
        dx = delta @ self.W[0]
        return dx, grads_W, grads_b

    # parameter plumbing -------------------------------------------------

    def parameters(self):
        return self.W + self.b

    def copy_from(self, other: "Mlp"):
        for dst, src in zip(self.parameters(), other.parameters()):
            np.copyto(dst, src)

    def clone(self) -> "Mlp":
        m = Mlp(self.sizes)
        m.copy_from(self)
        return m


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if self.lr == 0.0:
            return
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# policy and critics
# ---------------------------------------------------------------------------

def _log1m_tanh_sq(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    """tanh-squashed diagonal Gaussian over a fixed action box (-1, 1)^d."""

    def __init__(self, obs_dim, act_dim, hidden=(64, 64),
                 rng: np.random.Generator | None = None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.net = Mlp([obs_dim, *hidden, 2 * act_dim], rng=rng, out_scale=0.01)

    def _heads(self, out):
        mu = out[:, : self.act_dim]
        log_std = np.clip(out[:, self.act_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def sample(self, states, noise):
        """Reparameterized squashed sample for given standard-normal noise.

        Returns (actions, log_probs, cache); cache feeds the analytic
        gradient path of the actor loss.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        out, acts = self.net.forward(states)
        mu, log_std = self._heads(out)
        sigma = np.exp(log_std)
        u = mu + sigma * noise
        a = np.tanh(u)
        logp = np.sum(
            -0.5 * noise**2 - log_std - 0.5 * _LOG_2PI - _log1m_tanh_sq(u),
            axis=1,
        )
        cache = {
            "acts": acts,
            "raw": out[:, self.act_dim :],
            "sigma": sigma,
            "noise": noise,
            "a": a,
        }
        return a, logp, cache

    def act(self, state, rng: np.random.Generator | None = None,
            deterministic: bool = False):
        """Single-state action; tanh(mean) when deterministic."""
        state = np.asarray(state, dtype=np.float64).reshape(1, -1)
        if deterministic:
            out = self.net(state)
            mu, _ = self._heads(out)
            return np.tanh(mu[0])
        noise = rng.standard_normal((1, self.act_dim))
        a, _, _ = self.sample(state, noise)
        return a[0]

    def log_prob(self, states, actions):
        """Exact squashed-Gaussian log-density of given actions."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        a = np.clip(actions, -1.0 + 1e-6, 1.0 - 1e-6)
        u = np.arctanh(a)
        out = self.net(states)
        mu, log_std = self._heads(out)
        sigma = np.exp(log_std)
        logp = np.sum(
            -0.5 * ((u - mu) / sigma) ** 2
            - log_std
            - 0.5 * _LOG_2PI
            - np.log1p(-a * a),
            axis=1,
        )
        return logp


def log_prob_squashed(policy: GaussianPolicy, state, action) -> float:
    lp = policy.log_prob(state, action)
    return float(lp[0]) if lp.shape == (1,) else lp


class TwinCritic:
    """Two Q heads over (state, action) plus frozen target copies."""

    def __init__(self, obs_dim, act_dim, hidden=(64, 64),
                 rng: np.random.Generator | None = None):
        sizes = [obs_dim + act_dim, *hidden, 1]
        self.q1 = Mlp(sizes, rng=rng)
        self.q2 = Mlp(sizes, rng=rng)
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()

    def q_values(self, states, actions, use_target=False):
        x = np.concatenate([states, actions], axis=1)
        if use_target:
            return self.q1_target(x)[:, 0], self.q2_target(x)[:, 0]
        return self.q1(x)[:, 0], self.q2(x)[:, 0]

    def soft_update(self, tau: float):
        for main, tgt in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p_m, p_t in zip(main.parameters(), tgt.parameters()):
                p_t *= 1.0 - tau
                p_t += tau * p_m


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.pos = 0
        self.size = 0

    def add(self, s, a, r, s2, done):
        i = self.pos
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "s2": self.s2[idx],
            "done": self.done[idx],
        }


# ---------------------------------------------------------------------------
# losses, gradients, update
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    alpha: float = 0.05
    tau_soft: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 100_000
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 < self.tau_soft <= 1.0:
            raise ValueError("tau_soft must be in (0, 1]")


def critic_targets(policy: GaussianPolicy, critics: TwinCritic, batch,
                   noise_next, cfg: SacConfig) -> np.ndarray:
    """Bootstrap targets; uses target critics and a fresh policy sample."""
    a2, logp2, _ = policy.sample(batch["s2"], noise_next)
    q1t, q2t = critics.q_values(batch["s2"], a2, use_target=True)
    v_next = np.minimum(q1t, q2t) - cfg.alpha * logp2
    return batch["r"] + cfg.gamma * (1.0 - batch["done"]) * v_next


def critic_loss_value(critics: TwinCritic, batch, y) -> float:
    q1, q2 = critics.q_values(batch["s"], batch["a"])
    return float(np.mean((q1 - y) ** 2) + np.mean((q2 - y) ** 2))


def critic_gradients(critics: TwinCritic, batch, y):
    """(loss, grads for q1 params, grads for q2 params)."""
    x = np.concatenate([batch["s"], batch["a"]], axis=1)
    B = x.shape[0]
    loss = 0.0
    grads = []
    for net in (critics.q1, critics.q2):
        pred, cache = net.forward(x)
        err = pred[:, 0] - y
        loss += float(np.mean(err**2))
        dout = (2.0 / B) * err[:, None]
        _, gW, gb = net.backward(cache, dout)
        grads.append(gW + gb)
    return loss, grads[0], grads[1]


def actor_loss_value(policy: GaussianPolicy, critics: TwinCritic, batch,
                     noise, cfg: SacConfig) -> float:
    a, logp, _ = policy.sample(batch["s"], noise)
    q1, q2 = critics.q_values(batch["s"], a)
    return float(np.mean(cfg.alpha * logp - np.minimum(q1, q2)))


def actor_gradients(policy: GaussianPolicy, critics: TwinCritic, batch,
                    noise, cfg: SacConfig):
    """(loss, policy gradients, mean log-prob) with critics held fixed."""
    s = batch["s"]
    B = s.shape[0]
    a, logp, cache = policy.sample(s, noise)

    x = np.concatenate([s, a], axis=1)
    out1, cache1 = critics.q1.forward(x)
    out2, cache2 = critics.q2.forward(x)
    q1, q2 = out1[:, 0], out2[:, 0]
    qmin = np.minimum(q1, q2)
    loss = float(np.mean(cfg.alpha * logp - qmin))

    # dL/da through the element-wise min of the two critics
    pick1 = (q1 <= q2)[:, None]
    dq = np.full((B, 1), -1.0 / B)
    dx1, _, _ = critics.q1.backward(cache1, dq * pick1)
    dx2, _, _ = critics.q2.backward(cache2, dq * (~pick1))
    da_q = (dx1 + dx2)[:, s.shape[1] :]

    a_val = cache["a"]
    sigma = cache["sigma"]
    eps = cache["noise"]
    # d logp / du = 2 tanh(u); da/du = 1 - a^2
    du = da_q * (1.0 - a_val**2) + (cfg.alpha / B) * (2.0 * a_val)
    dmu = du
    dls = du * sigma * eps - cfg.alpha / B
    raw = cache["raw"]
    inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    dout = np.concatenate([dmu, dls * inside], axis=1)
    _, gW, gb = policy.net.backward(cache["acts"], dout)
    return loss, gW + gb, float(np.mean(logp))


@dataclass
class SacAgent:
    """Bundles policy, critics, buffer, and optimizer state."""

    policy: GaussianPolicy
    critics: TwinCritic
    buffer: ReplayBuffer
    cfg: SacConfig
    rng: np.random.Generator
    opt_policy: Adam = None
    opt_q1: Adam = None
    opt_q2: Adam = None

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, cfg: SacConfig) -> "SacAgent":
        rng = np.random.default_rng(cfg.seed)
        policy = GaussianPolicy(obs_dim, act_dim, cfg.hidden, rng=rng)
        critics = TwinCritic(obs_dim, act_dim, cfg.hidden, rng=rng)
        buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim, act_dim)
        agent = cls(policy, critics, buffer, cfg, rng)
        agent._init_optimizers()
        return agent

    def _init_optimizers(self):
        lr = self.cfg.lr
        self.opt_policy = Adam(self.policy.net.parameters(), lr=lr)
        self.opt_q1 = Adam(self.critics.q1.parameters(), lr=lr)
        self.opt_q2 = Adam(self.critics.q2.parameters(), lr=lr)

    def update(self) -> dict:
        """One gradient step on critics and actor plus a soft target update."""
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            raise ValueError("not enough transitions in the replay buffer")
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        noise_next = self.rng.standard_normal((cfg.batch_size, self.policy.act_dim))
        noise_actor = self.rng.standard_normal((cfg.batch_size, self.policy.act_dim))

        y = critic_targets(self.policy, self.critics, batch, noise_next, cfg)
        critic_loss, g1, g2 = critic_gradients(self.critics, batch, y)
        actor_loss, gp, mean_logp = actor_gradients(
            self.policy, self.critics, batch, noise_actor, cfg
        )
        report = {
            "critic_loss": critic_loss,
            "actor_loss": actor_loss,
            "entropy": -mean_logp,
        }
        for v in report.values():
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite SAC losses: {report}")

        self.opt_q1.step(self.critics.q1.parameters(), g1)
        self.opt_q2.step(self.critics.q2.parameters(), g2)
        self.opt_policy.step(self.policy.net.parameters(), gp)
        self.critics.soft_update(cfg.tau_soft)
        return report


def sample_action(policy: GaussianPolicy, state,
                  rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> np.ndarray:
    return policy.act(state, rng=rng, deterministic=deterministic)


# ---------------------------------------------------------------------------
# checkpoint file format (versioned, self-describing text)
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_NET_NAMES = ("policy", "q1", "q2", "q1_target", "q2_target")


class CheckpointError(ValueError):
    pass


def _write_array(fh, name, arr):
    a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    fh.write(f"[array {name} {a.shape[0]} {a.shape[1]}]\n")
    for row in a:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _net_arrays(prefix, net: Mlp):
    out = []
    for i, (w, b) in enumerate(zip(net.W, net.b)):
        out.append((f"{prefix}.W{i}", w))
        out.append((f"{prefix}.b{i}", b))
    return out


def save_checkpoint(path, agent: SacAgent, extra_config: dict | None = None):
    """Versioned text checkpoint: shapes, row-major arrays, config echo."""
    buf = io.StringIO()
    buf.write(f"cubestack-checkpoint v{CHECKPOINT_VERSION}\n")
    buf.write(f"obs_dim = {agent.policy.obs_dim}\n")
    buf.write(f"act_dim = {agent.policy.act_dim}\n")
    cfg = agent.cfg
    buf.write(f"sac.gamma = {cfg.gamma!r}\n")
    buf.write(f"sac.alpha = {cfg.alpha!r}\n")
    buf.write(f"sac.tau_soft = {cfg.tau_soft!r}\n")
    buf.write(f"sac.lr = {cfg.lr!r}\n")
    buf.write(f"sac.batch_size = {cfg.batch_size}\n")
    buf.write(f"sac.buffer_capacity = {cfg.buffer_capacity}\n")
    buf.write(f"sac.hidden = {','.join(str(h) for h in cfg.hidden)}\n")
    buf.write(f"sac.seed = {cfg.seed}\n")
    for key, val in sorted((extra_config or {}).items()):
        buf.write(f"config.{key} = {val}\n")
    nets = {
        "policy": agent.policy.net,
        "q1": agent.critics.q1,
        "q2": agent.critics.q2,
        "q1_target": agent.critics.q1_target,
        "q2_target": agent.critics.q2_target,
    }
    for prefix in _NET_NAMES:
        for name, arr in _net_arrays(prefix, nets[prefix]):
            _write_array(buf, name, arr)
    data = buf.getvalue()
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(data)
    import os

    os.replace(tmp, path)


def load_checkpoint(path) -> SacAgent:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("cubestack-checkpoint v"):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].split("v")[-1])
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} is newer than supported {CHECKPOINT_VERSION}"
        )
    kv = {}
    arrays = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("[array "):
            _, name, rows, cols = line.rstrip("]").split()
            rows, cols = int(rows), int(cols)
            vals = [
                np.fromstring(lines[i + 1 + r], dtype=np.float64, sep=" ")
                for r in range(rows)
            ]
            arr = np.vstack(vals)
            if arr.shape != (rows, cols):
                raise CheckpointError(f"{path}: array {name} shape mismatch")
            arrays[name] = arr
            i += 1 + rows
        else:
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
            i += 1

    try:
        obs_dim = int(kv["obs_dim"])
        act_dim = int(kv["act_dim"])
        hidden = tuple(int(h) for h in kv["sac.hidden"].split(","))
        cfg = SacConfig(
            gamma=float(kv["sac.gamma"]),
            alpha=float(kv["sac.alpha"]),
            tau_soft=float(kv["sac.tau_soft"]),
            lr=float(kv["sac.lr"]),
            batch_size=int(kv["sac.batch_size"]),
            buffer_capacity=int(kv["sac.buffer_capacity"]),
            hidden=hidden,
            seed=int(kv["sac.seed"]),
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: missing checkpoint key {e}") from e

    agent = SacAgent.create(obs_dim, act_dim, cfg)
    nets = {
        "policy": agent.policy.net,
        "q1": agent.critics.q1,
        "q2": agent.critics.q2,
        "q1_target": agent.critics.q1_target,
        "q2_target": agent.critics.q2_target,
    }
    for prefix in _NET_NAMES:
        net = nets[prefix]
        for i_layer, (w, b) in enumerate(zip(net.W, net.b)):
            for label, dst in ((f"{prefix}.W{i_layer}", w), (f"{prefix}.b{i_layer}", b)):
                if label not in arrays:
                    raise CheckpointError(f"{path}: missing array {label}")
                src = arrays[label]
                if src.shape == (1, dst.shape[0]) and dst.ndim == 1:
                    src = src[0]
                if src.shape != dst.shape:
                    raise CheckpointError(
                        f"{path}: {label} has shape {src.shape}, expected {dst.shape}"
                    )
                np.copyto(dst, src)
    return agent
