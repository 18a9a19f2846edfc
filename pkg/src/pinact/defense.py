"""Learned per-sample eigenvector selection and input inactivation.

An agent network maps an image to per-component selection probabilities;
Bernoulli sampling yields a binary mask and the image is reconstructed from
the selected components only. Training is pure score-function policy
gradient: the reward is the negative L2 reconstruction error of the clean
deviation from a noisy input, minus an L0 sparsity charge on the mask, with
the minibatch mean reward as the variance-reducing baseline.

Inference/backward modes:
  stochastic      sample the mask with a recorded seed (deployment default)
  deterministic   threshold the probabilities at 0.5 (reproducible reports)
  reparam         straight-through: sampled mask forward, identity backward
                  through the sampling (white-box online attacks)
  bpda            frozen thresholded mask; gradient is the plain subspace
                  projection of the downstream gradient (audit attacks)
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from pinact import nn, pca
from pinact.data import draw_scaled_noise
from pinact.linalg import SeededRng

P_CLIP = 1e-12


@dataclass
class PinConfig:
    lam: float = 0.015
    mc_samples: int = 12
    noise_intensity: float = 0.04
    epochs: int = 70
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    decay_epochs: int = 20
    n_components: int = 256
    dae_enabled: bool = False
    inference_mode: str = "stochastic"
    seed: int = 7

    def __post_init__(self):
        if self.lam < 0 or self.mc_samples < 1 or self.noise_intensity < 0:
            raise ValueError("invalid defense configuration")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, payload):
        return cls(**payload)


@dataclass(frozen=True)
class DefenseMode:
    kind: str
    seed: int | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in ("stochastic", "deterministic", "reparam", "bpda"):
            raise ValueError(f"unknown defense mode {self.kind!r}")


def stochastic_mode(seed):
    return DefenseMode("stochastic", seed=seed)


def deterministic_mode(threshold=0.5):
    return DefenseMode("deterministic", threshold=threshold)


def reparam_mode(seed):
    return DefenseMode("reparam", seed=seed)


def bpda_mode(threshold=0.5):
    return DefenseMode("bpda", threshold=threshold)


# --- agent ---------------------------------------------------------------------


def build_agent_spec(n_components, height=32, width=32):
    def down(n):
        return (n + 2 - 3) // 2 + 1

    flat = down(down(height)) * down(down(width)) * 32
    return nn.NetworkSpec(
        [
            nn.Conv2d(1, 16, 3, 2, 1),
            nn.PReLU(16),
            nn.Conv2d(16, 32, 3, 2, 1),
            nn.PReLU(32),
            nn.Flatten(),
            nn.Affine(flat, 256),
            nn.PReLU(1),
            nn.Affine(256, n_components),
            nn.Sigmoid(),
        ],
        (1, height, width),
    )


def build_dae_spec(height=32, width=32):
    # linear output head: the identity-plus-denoise map regresses cleanly
    return nn.NetworkSpec(
        [
            nn.Conv2d(1, 8, 3, 1, 1),
            nn.PReLU(8),
            nn.Conv2d(8, 8, 3, 1, 1),
            nn.PReLU(8),
            nn.Conv2d(8, 1, 3, 1, 1),
        ],
        (1, height, width),
    )


class PinDefense:
    """Agent parameters plus the eigenbasis they select from."""

    def __init__(self, basis, config=None, params=None, dae_params=None,
                 height=None, width=None):
        self.basis = basis
        self.config = config or PinConfig(n_components=basis.n_components)
        if self.config.n_components != basis.n_components:
            raise ValueError("config component count disagrees with the basis")
        side = int(round(np.sqrt(basis.dim)))
        if height is None and width is None and side * side != basis.dim:
            raise ValueError("non-square images need explicit height and width")
        self.height = height if height is not None else side
        self.width = width if width is not None else side
        self.spec = build_agent_spec(basis.n_components, self.height, self.width)
        if params is None:
            params = nn.init_params(self.spec, SeededRng(self.config.seed, 301))
            # zero head: initial probabilities are exactly 0.5 everywhere
            params[-2]["w"][:] = 0.0
            params[-2]["b"][:] = 0.0
        self.params = params
        self.dae_spec = (
            build_dae_spec(self.height, self.width)
            if self.config.dae_enabled
            else None
        )
        self.dae_params = dae_params

    def checkpoint_hash(self):
        return nn.params_hash(self.params)

    def _as_map(self, x):
        return np.asarray(x, dtype=np.float64).reshape(1, self.height, self.width)

    def agent_input(self, x):
        """What the agent actually sees: the raw image, or its denoised
        version when the frozen DAE front end is enabled."""
        xm = self._as_map(x)
        if self.dae_spec is None:
            return xm
        if self.dae_params is None:
            raise ValueError("DAE enabled but no pretrained DAE parameters set")
        return nn.predict(self.dae_spec, self.dae_params, xm)


def agent_forward(defense, x):
    """Selection probabilities for one image; strictly inside (0, 1)."""
    p = nn.predict(defense.spec, defense.params, defense.agent_input(x))
    return np.clip(p, P_CLIP, 1.0 - P_CLIP)


def sample_mask(p, rng):
    """One Bernoulli draw per component."""
    p = np.asarray(p, dtype=np.float64)
    return (rng.uniform(p.size) < p).astype(np.float64)


def threshold_mask(p, threshold=0.5):
    return (np.asarray(p) >= threshold).astype(np.float64)


# --- reward and policy gradient --------------------------------------------------


@dataclass
class RewardRecord:
    reward: float
    recon_term: float
    l0: int
    baseline: float = 0.0


def reward(q, x_noisy, x_clean, basis, lam):
    """Reward of one mask: -||B_q B_q^T (x_n - x_m) - (x - x_m)|| - lam ||q||_0."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    x_noisy = np.asarray(x_noisy, dtype=np.float64).reshape(-1)
    x_clean = np.asarray(x_clean, dtype=np.float64).reshape(-1)
    recon = pca.project_raw(basis, q, x_noisy) - basis.mean
    target = x_clean - basis.mean
    recon_term = float(np.linalg.norm(recon - target))
    l0 = int(np.count_nonzero(q))
    return RewardRecord(-recon_term - lam * l0, recon_term, l0)


def reward_many(masks, x_noisy, x_clean, basis, lam):
    """Vectorized rewards for a stack of masks.

    Uses the orthonormal-column identity
    ||B(q*c) - t||^2 = sum_j q_j (c_j^2 - 2 c_j t_j) + ||t||^2
    with c the noisy coordinates and t the clean deviation, so the cost per
    mask is O(N) instead of O(N D).
    """
    masks = np.asarray(masks, dtype=np.float64)
    c = pca.coefficients(basis, np.asarray(x_noisy).reshape(-1) - basis.mean)
    t_full = np.asarray(x_clean).reshape(-1) - basis.mean
    t = pca.coefficients(basis, t_full)
    t_sq = float(t_full @ t_full)
    per_comp = c * c - 2.0 * c * t
    resid_sq = np.maximum(masks @ per_comp + t_sq, 0.0)
    recon_terms = np.sqrt(resid_sq)
    l0 = masks.sum(axis=1)
    return -(recon_terms + lam * l0), recon_terms, l0


def log_prob_mask(p, q):
    """log P(q | p) under independent Bernoulli components."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(q * np.log(p) + (1.0 - q) * np.log(1.0 - p)))


def log_prob_grad_p(p, q):
    """d log P(q|p) / d p, one row per mask if q is a stack."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    q = np.asarray(q, dtype=np.float64)
    return q / p - (1.0 - q) / (1.0 - p)


def policy_gradient_upstream(p, masks, rewards, baseline):
    """Upstream gradient at the probability output for the loss -E[reward].

    Score-function estimator: -(1/k) sum_i (r_i - baseline) dlogP(q_i|p)/dp.
    """
    w = np.asarray(rewards, dtype=np.float64) - baseline
    grads = log_prob_grad_p(p, masks)
    return -(w @ grads) / len(w)


def reinforce_step(defense, batch, state, rng):
    """One policy-gradient step over a minibatch of (noisy, clean) pairs.

    Per image: k sampled masks and their rewards; the baseline is the mean
    reward across the whole minibatch. Returns (mean reward, mean L0).
    """
    if not batch:
        raise ValueError("empty minibatch")
    cfg = defense.config
    k = cfg.mc_samples
    staged = []
    all_rewards = []
    for idx, (x_noisy, x_clean) in enumerate(batch):
        x_in = defense.agent_input(x_noisy)
        p_raw, tape = nn.forward(defense.spec, defense.params, x_in)
        p = np.clip(p_raw, P_CLIP, 1.0 - P_CLIP)
        image_rng = rng.derive(f"mask/{idx}")
        masks = (
            image_rng.uniform(k * p.size).reshape(k, p.size) < p
        ).astype(np.float64)
        rewards, _, l0 = reward_many(masks, x_noisy, x_clean, defense.basis, cfg.lam)
        if not np.all(np.isfinite(rewards)):
            raise FloatingPointError("non-finite reward in minibatch")
        staged.append((p, tape, masks, rewards, l0))
        all_rewards.append(rewards)
    baseline = float(np.mean(np.concatenate(all_rewards)))

    grads = nn.zeros_like_params(defense.params)
    for p, tape, masks, rewards, _ in staged:
        upstream = policy_gradient_upstream(p, masks, rewards, baseline)
        res = nn.backward(tape, upstream)
        nn.accumulate_params(grads, res.param_grads, 1.0 / len(batch))
    nn.sgd_momentum_step(defense.params, grads, state)
    mean_reward = float(np.mean(np.concatenate(all_rewards)))
    mean_l0 = float(np.mean([s[4].mean() for s in staged]))
    return mean_reward, mean_l0


def train(images, basis, config=None, rng=None, dae_params=None):
    """Train the selection agent on clean images with Gaussian-noise inputs.

    Returns (PinDefense, history) where history rows are
    (epoch, mean_reward, mean_l0_fraction). A non-finite reward aborts and
    restores the last completed epoch's parameters.
    """
    config = config or PinConfig(n_components=basis.n_components)
    defense = PinDefense(basis, config, dae_params=dae_params)
    if config.dae_enabled and dae_params is None:
        raise ValueError("dae_enabled requires pretrained DAE parameters")
    rng = rng or SeededRng(config.seed, 0)
    images = np.asarray(images, dtype=np.float64)
    state = nn.init_optimizer(
        defense.params, config.lr, config.momentum, config.decay_epochs
    )
    order = np.arange(len(images))
    history = []
    snapshot = nn.copy_params(defense.params)
    for epoch in range(config.epochs):
        state.epoch = epoch
        epoch_rng = rng.derive(f"epoch/{epoch}")
        epoch_rng.shuffle(order)
        rewards_seen, l0_seen = [], []
        try:
            for bi, start in enumerate(range(0, len(order), config.batch_size)):
                chosen = order[start : start + config.batch_size]
                batch_rng = epoch_rng.derive(f"batch/{bi}")
                batch = []
                for j, i in enumerate(chosen):
                    noise = draw_scaled_noise(
                        images[i],
                        config.noise_intensity,
                        batch_rng.derive(f"noise/{j}"),
                    )
                    batch.append((np.clip(images[i] + noise, 0.0, 1.0), images[i]))
                mean_r, mean_l0 = reinforce_step(
                    defense, batch, state, batch_rng.derive("masks")
                )
                rewards_seen.append(mean_r)
                l0_seen.append(mean_l0)
        except FloatingPointError:
            warnings.warn(
                f"training aborted at epoch {epoch}: non-finite reward; "
                "restoring the last completed epoch"
            )
            defense.params = snapshot
            break
        snapshot = nn.copy_params(defense.params)
        history.append(
            (
                epoch,
                float(np.mean(rewards_seen)),
                float(np.mean(l0_seen)) / basis.n_components,
            )
        )
    return defense, history


# --- inference and attack-facing gradients ---------------------------------------


def _mode_rng(mode, rng):
    if rng is not None:
        return rng
    if mode.seed is None:
        raise ValueError(f"{mode.kind} mode needs a seed or an explicit rng")
    return SeededRng(mode.seed, 0)


def select_mask(defense, x, mode, rng=None):
    """Probabilities and the mask the given mode would use."""
    p = agent_forward(defense, x)
    if mode.kind in ("stochastic", "reparam"):
        q = sample_mask(p, _mode_rng(mode, rng))
    else:
        q = threshold_mask(p, mode.threshold)
    return p, q


def inactivate(defense, x, mode=None, rng=None):
    """Project one image onto its selected component subspace."""
    mode = mode or deterministic_mode()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _, q = select_mask(defense, x, mode, rng)
    return pca.project(defense.basis, q, x)


def defended_input_gradient(defense, x, downstream_grad, mode, rng=None):
    """Gradient of <downstream_grad, defended(x)> with respect to x.

    bpda: the mask is frozen at [p >= threshold] and the agent path is
    dropped, leaving the exact subspace projection of the downstream
    gradient. reparam: straight-through; the sampled-mask forward gets an
    identity backward through the sampling, adding the agent-path term.
    """
    if mode.kind not in ("reparam", "bpda"):
        raise ValueError(f"no gradient contract for mode {mode.kind!r}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    g = np.asarray(downstream_grad, dtype=np.float64).reshape(-1)
    basis = defense.basis

    g_coords = pca.coefficients(basis, g)
    if mode.kind == "bpda":
        p = agent_forward(defense, x)
        q = threshold_mask(p, mode.threshold)
        return basis.eigenvectors @ (q * g_coords)

    # straight-through
    x_in = defense.agent_input(x)
    p_raw, tape = nn.forward(defense.spec, defense.params, x_in)
    p = np.clip(p_raw, P_CLIP, 1.0 - P_CLIP)
    q = sample_mask(p, _mode_rng(mode, rng))
    direct = basis.eigenvectors @ (q * g_coords)
    # sensitivity of the objective to each mask entry, through the projection
    c = pca.coefficients(basis, x - basis.mean)
    upstream_p = g_coords * c
    agent_path = nn.backward(tape, upstream_p).input_grad
    if defense.dae_spec is not None:
        xm = defense._as_map(x)
        _, dae_tape = nn.forward(defense.dae_spec, defense.dae_params, xm)
        agent_path = nn.backward(dae_tape, agent_path).input_grad
    return direct + agent_path.reshape(-1)


# --- optional denoising front end -------------------------------------------------


def dae_pretrain(images, config=None, rng=None, epochs=20, lr=0.3):
    """Train the small conv denoiser on (noisy, clean) pairs and freeze it."""
    config = config or PinConfig()
    rng = rng or SeededRng(config.seed, 17)
    images = np.asarray(images, dtype=np.float64)
    spec = build_dae_spec()
    params = nn.init_params(spec, rng.derive("init"))
    state = nn.init_optimizer(params, lr, 0.9, decay_epochs=10)
    order = np.arange(len(images))
    h = w = int(np.sqrt(images.shape[1]))
    for epoch in range(epochs):
        state.epoch = epoch
        ep_rng = rng.derive(f"epoch/{epoch}")
        ep_rng.shuffle(order)
        for start in range(0, len(order), 16):
            batch = order[start : start + 16]
            grads = nn.zeros_like_params(params)
            for j, i in enumerate(batch):
                noise = draw_scaled_noise(
                    images[i], config.noise_intensity, ep_rng.derive(f"n/{start}/{j}")
                )
                x_noisy = np.clip(images[i] + noise, 0.0, 1.0).reshape(1, h, w)
                out, tape = nn.forward(spec, params, x_noisy)
                diff = out - images[i].reshape(1, h, w)
                res = nn.backward(tape, 2.0 * diff / diff.size)
                nn.accumulate_params(grads, res.param_grads, 1.0 / len(batch))
            nn.clip_grad_norm(grads, 0.5)
            nn.sgd_momentum_step(params, grads, state)
    return params


def dae_mse(params, noisy, clean, height=32, width=32):
    spec = build_dae_spec(height, width)
    out = nn.predict(spec, params, np.asarray(noisy).reshape(1, height, width))
    return float(np.mean((out.reshape(-1) - np.asarray(clean).reshape(-1)) ** 2))


# --- checkpointing -----------------------------------------------------------------


def save_defense(out_dir, defense, history=None, basis_path=None):
    """Defense checkpoint: agent params, config as JSON, reward curve CSV."""
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_params(out_dir / "agent.imnn", defense.spec, defense.params)
    meta = {
        "config": defense.config.to_json(),
        "basis_file": str(basis_path) if basis_path else None,
        "basis_hash": pca.basis_hash(defense.basis),
        "agent_hash": defense.checkpoint_hash(),
    }
    with open(out_dir / "defense.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    if defense.dae_params is not None:
        nn.save_params(out_dir / "dae.imnn", defense.dae_spec, defense.dae_params)
    if history is not None:
        with open(out_dir / "reward_curve.csv", "w") as fh:
            fh.write("epoch,mean_reward,mean_l0_fraction\n")
            for epoch, r, frac in history:
                fh.write(f"{epoch},{r:.6f},{frac:.6f}\n")


def load_defense(out_dir, basis):
    with open(out_dir / "defense.json") as fh:
        meta = json.load(fh)
    config = PinConfig.from_json(meta["config"])
    if meta["basis_hash"] != pca.basis_hash(basis):
        raise ValueError("basis file does not match the defense checkpoint")
    defense = PinDefense(basis, config)
    defense.params = nn.load_params(out_dir / "agent.imnn", defense.spec)
    if config.dae_enabled:
        defense.dae_params = nn.load_params(out_dir / "dae.imnn", defense.dae_spec)
    return defense
