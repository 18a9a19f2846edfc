"""Attacks on the verification pipeline, offline and online.

Offline attacks differentiate the bare recognizer and never touch defense
parameters; online attacks differentiate through the deployed defense with
either the straight-through backward (default) or the BPDA surrogate. All
budgets follow the intensity convention ||perturbation|| / ||image|| for the
L2 family, or an explicit L-infinity epsilon for the projected family.
Every attack is deterministic given (seed, config, target checkpoints).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from pinact import defense as defense_mod
from pinact import nn, pca
from pinact.data import perturbation_intensity, write_pgm
from pinact.linalg import SeededRng
from pinact.recognizer import embed, similarity

DODGING = "dodging"
IMPERSONATION = "impersonation"


@dataclass
class AttackConfig:
    intensity: float | None = None
    epsilon: float | None = None
    steps: int = 1
    step_size: float | None = None
    objective: str = DODGING
    seed: int = 0

    def __post_init__(self):
        if self.objective not in (DODGING, IMPERSONATION):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


class AttackTarget:
    """Recognizer plus optional deployed defense.

    `online` controls what the attacker differentiates: the bare model
    (offline) or the defended pipeline (online, via grad_mode). Deployed
    evaluation always applies the defense regardless of the flag; decision
    queries use eval_mode, re-seeded per query so the pipeline is a
    deterministic function of its input.
    """

    def __init__(self, model, defense=None, online=False, grad_mode=None,
                 eval_mode=None):
        if online and defense is None:
            raise ValueError("online attacks need a deployed defense")
        self.model = model
        self.defense = defense
        self.online = online
        self.grad_mode = grad_mode or defense_mod.reparam_mode(0)
        self.eval_mode = eval_mode or defense_mod.stochastic_mode(0)
        if online and self.grad_mode.kind not in ("reparam", "bpda"):
            raise ValueError("online gradients need reparam or bpda mode")

    def embed_ref(self, x_ref):
        return embed(self.model, x_ref)

    def deployed_image(self, x, rng=None):
        """What the recognizer actually sees at evaluation time."""
        if self.defense is None:
            return np.asarray(x, dtype=np.float64).reshape(-1)
        if rng is None:
            rng = SeededRng(self.eval_mode.seed or 0, 0)
        return defense_mod.inactivate(self.defense, x, self.eval_mode, rng)

    def deployed_similarity(self, x_probe, e_ref, rng=None):
        return similarity(embed(self.model, self.deployed_image(x_probe, rng)), e_ref)

    def _bare_similarity_grad(self, x, e_ref):
        xm = np.asarray(x, dtype=np.float64).reshape(
            1, self.model.height, self.model.width
        )
        out, tape = nn.forward(self.model.embed_spec, self.model.embed_params(), xm)
        res = nn.backward(tape, e_ref)
        return float(out @ e_ref), res.input_grad.reshape(-1)

    def similarity_grad(self, x, e_ref, rng=None):
        """(similarity, d similarity / d x) along the attacker's view."""
        if not self.online:
            return self._bare_similarity_grad(x, e_ref)
        mode = self.grad_mode
        base = rng if rng is not None else SeededRng(mode.seed or 0, 0)
        # clones of one stream so forward and backward sample the same mask
        fwd_rng = SeededRng(base.seed, base.stream)
        bwd_rng = SeededRng(base.seed, base.stream)
        _, q = defense_mod.select_mask(self.defense, x, mode, fwd_rng)
        x_def = pca.project(self.defense.basis, q, x)
        s, g_rec = self._bare_similarity_grad(x_def, e_ref)
        grad = defense_mod.defended_input_gradient(
            self.defense, x, g_rec, mode, bwd_rng
        )
        return s, grad


def pair_objective_grad(target, x_probe, x_ref, objective, rng=None):
    """Gradient of the attack objective (ascent direction) w.r.t. the probe."""
    e_ref = target.embed_ref(x_ref)
    _, grad = target.similarity_grad(x_probe, e_ref, rng)
    return grad if objective == IMPERSONATION else -grad


def attack_success(target, x_probe, e_ref, tau, objective):
    s = target.deployed_similarity(x_probe, e_ref)
    return s <= tau if objective == DODGING else s > tau


# --- gradient attacks --------------------------------------------------------


def _intensity_step(x, direction, intensity):
    """Signed step scaled so the pre-clip perturbation has the exact
    intensity; returns (new_x, pre-clip perturbation)."""
    sgn = np.sign(direction)
    nnz = np.count_nonzero(sgn)
    if nnz == 0:
        return x.copy(), np.zeros_like(x)
    alpha = intensity * np.linalg.norm(x) / np.sqrt(nnz)
    eta = alpha * sgn
    return np.clip(x + eta, 0.0, 1.0), eta


def fgsm(target, x_probe, x_ref, config, rng=None):
    """Single signed-gradient step at the configured intensity."""
    if config.intensity is None:
        raise ValueError("fgsm needs an intensity budget")
    x = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    if config.intensity == 0:
        return x.copy(), {"realized_intensity": 0.0, "zero_gradient": False}
    g = pair_objective_grad(target, x, x_ref, config.objective, rng)
    if not np.any(g):
        return x.copy(), {"realized_intensity": 0.0, "zero_gradient": True}
    x_adv, eta = _intensity_step(x, g, config.intensity)
    return x_adv, {
        "preclip_intensity": float(np.linalg.norm(eta) / np.linalg.norm(x)),
        "realized_intensity": perturbation_intensity(x, x_adv),
        "zero_gradient": False,
    }


def ifgsm(target, x_probe, x_ref, config, rng=None):
    """Iterative FGSM: per-step budgets summing to the total intensity."""
    if config.intensity is None:
        raise ValueError("ifgsm needs an intensity budget")
    x0 = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    x = x0.copy()
    step_intensity = config.intensity / config.steps
    base_rng = rng or SeededRng(config.seed, 0)
    for step in range(config.steps):
        g = pair_objective_grad(
            target, x, x_ref, config.objective, base_rng.derive(f"step/{step}")
        )
        if not np.any(g):
            break
        sgn = np.sign(g)
        alpha = step_intensity * np.linalg.norm(x0) / np.sqrt(np.count_nonzero(sgn))
        x = np.clip(x + alpha * sgn, 0.0, 1.0)
    return x, {"realized_intensity": perturbation_intensity(x0, x)}


def pgd(target, x_probe, x_ref, config, rng=None):
    """Projected signed-gradient ascent inside the L-infinity epsilon ball."""
    if config.epsilon is None:
        raise ValueError("pgd needs an L-infinity epsilon")
    x0 = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    eps = config.epsilon
    step = config.step_size if config.step_size is not None else 2.5 * eps / config.steps
    x = x0.copy()
    base_rng = rng or SeededRng(config.seed, 0)
    for i in range(config.steps):
        g = pair_objective_grad(
            target, x, x_ref, config.objective, base_rng.derive(f"step/{i}")
        )
        x = x + step * np.sign(g)
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
        assert np.max(np.abs(x - x0)) <= eps + 1e-12
    return x, {
        "realized_linf": float(np.max(np.abs(x - x0))),
        "realized_intensity": perturbation_intensity(x0, x),
    }


def deepfool_similarity(target, x_probe, x_ref, objective, tau, max_iter=50,
                        overshoot=1.02, rng=None):
    """Minimal-norm boundary crossing of the decision margin s - tau.

    Linearizes the margin at each iterate and steps by f / ||grad f||^2 times
    grad f (with a small overshoot) until the decision flips.
    """
    x0 = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    e_ref = target.embed_ref(x_ref)
    base_rng = rng or SeededRng(0, 0)

    def margin_and_grad(x, step):
        s, g = target.similarity_grad(x, e_ref, base_rng.derive(f"df/{step}"))
        if objective == DODGING:
            return s - tau, g
        return tau - s, -g

    f0, _ = margin_and_grad(x0, -1)
    if f0 <= 0:
        raise ValueError("pair is already on the wrong side of the threshold")
    x = x0.copy()
    flipped = False
    i = -1
    for i in range(max_iter):
        f, g = margin_and_grad(x, i)
        if f <= 0:
            flipped = True
            break
        gnorm_sq = float(g @ g)
        if gnorm_sq == 0:
            break
        x = np.clip(x - overshoot * (f / gnorm_sq) * g, 0.0, 1.0)
    return x, {
        "flipped": flipped,
        "iterations": i + 1,
        "realized_intensity": perturbation_intensity(x0, x),
    }


# --- patch attack ------------------------------------------------------------


@dataclass
class StickerSpec:
    top: int = 2
    left: int = 10
    height: int = 6
    width: int = 12
    steps: int = 200
    step_size: float = 0.05
    restarts: int = 3
    batch: int = 24

    def region_slice(self, image_h, image_w):
        if (
            self.top < 0
            or self.left < 0
            or self.top + self.height > image_h
            or self.left + self.width > image_w
            or self.height < 1
            or self.width < 1
        ):
            raise ValueError("sticker region out of image bounds")
        return slice(self.top, self.top + self.height), slice(
            self.left, self.left + self.width
        )


def apply_sticker(image, patch, spec, h, w):
    img = np.asarray(image, dtype=np.float64).reshape(h, w).copy()
    rs, cs = spec.region_slice(h, w)
    img[rs, cs] = patch
    return img.reshape(-1)


def sticker_attack(target, gallery_images, target_image, spec, tau, seed=0):
    """One shared patch optimized to match every gallery image to the target.

    Projected gradient ascent on the mean similarity to the target identity
    over gallery minibatches; the patch is unconstrained inside its region
    (beyond [0,1]) and untouched pixels stay intact. Returns the best patch
    across restarts plus per-image success at the threshold.
    """
    gallery = [np.asarray(g, dtype=np.float64).reshape(-1) for g in gallery_images]
    if not gallery:
        raise ValueError("empty gallery")
    h, w = target.model.height, target.model.width
    rs, cs = spec.region_slice(h, w)
    mask2d = np.zeros((h, w), dtype=bool)
    mask2d[rs, cs] = True
    mask = mask2d.reshape(-1)
    e_t = target.embed_ref(target_image)
    root = SeededRng(seed, 0)

    best_patch, best_rate = None, -1.0
    for restart in range(spec.restarts):
        rng = root.derive(f"restart/{restart}")
        patch = 0.5 + 0.25 * rng.standard_normal(spec.height * spec.width).reshape(
            spec.height, spec.width
        )
        patch = np.clip(patch, 0.0, 1.0)
        for step in range(spec.steps):
            order = rng.choice(len(gallery), size=min(spec.batch, len(gallery)),
                               replace=False)
            g_sum = np.zeros(h * w)
            for j in order:
                x = apply_sticker(gallery[j], patch, spec, h, w)
                _, g = target.similarity_grad(
                    x, e_t, rng.derive(f"q/{step}/{j}")
                )
                g_sum += g
            g_patch = (g_sum / len(order))[mask].reshape(spec.height, spec.width)
            patch = np.clip(patch + spec.step_size * np.sign(g_patch), 0.0, 1.0)
        hits = [
            attack_success(
                target, apply_sticker(g, patch, spec, h, w), e_t, tau, IMPERSONATION
            )
            for g in gallery
        ]
        rate = float(np.mean(hits))
        if rate > best_rate:
            best_rate, best_patch = rate, patch.copy()
    return best_patch, {"error_rate": best_rate}


# --- decision-based black box -------------------------------------------------


@dataclass
class DistortionTrace:
    checkpoints: list = field(default_factory=list)  # (iteration, mse, success)
    bootstrap_mse: float = float("nan")
    accepted: int = 0

    def final_mse(self):
        return self.checkpoints[-1][1] if self.checkpoints else self.bootstrap_mse


def _mse(a, b):
    d = a - b
    return float(d @ d / d.size)


def decision_blackbox(target, x_probe, x_ref, objective, tau, iters, rng,
                      checkpoints=(200, 1000, 2000), sigma=0.35, pull=0.10,
                      bootstrap_tries=200):
    """Decision-only contraction walk toward the clean probe.

    Starts from a known-adversarial point (the reference image for
    impersonation, a noise blend for dodging), proposes a Gaussian step plus
    a contraction toward the clean image, and accepts only proposals that
    stay adversarial without increasing the distortion; the step sizes adapt
    to the acceptance rate. The trace records (iteration, mse, success) at
    the requested checkpoints.
    """
    x = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    e_ref = target.embed_ref(x_ref)

    adv = None
    if objective == IMPERSONATION:
        start = np.asarray(x_ref, dtype=np.float64).reshape(-1)
        if attack_success(target, start, e_ref, tau, objective):
            adv = start
    if adv is None:
        for t in range(bootstrap_tries):
            blend = min(1.0, 0.3 + 0.7 * (t / max(bootstrap_tries - 1, 1)))
            noise = rng.derive(f"boot/{t}").uniform(x.size)
            cand = np.clip((1 - blend) * x + blend * noise, 0.0, 1.0)
            if attack_success(target, cand, e_ref, tau, objective):
                adv = cand
                break
    if adv is None:
        raise RuntimeError("no adversarial starting point found in the budget")

    h = w = int(np.sqrt(x.size))
    trace = DistortionTrace(bootstrap_mse=_mse(adv, x))
    current_mse = trace.bootstrap_mse
    cp = sorted(set(int(c) for c in checkpoints if c <= iters))
    cp_idx = 0
    window_hits = 0
    for it in range(1, iters + 1):
        step_rng = rng.derive(f"step/{it}")
        delta = x - adv
        if it % 25 == 0:
            # pure contraction probe: jump toward the clean image
            cand = np.clip(x - 0.8 * delta, 0.0, 1.0)
        else:
            scale = sigma * np.sqrt(current_mse)
            noise = step_rng.standard_normal(x.size)
            cand = np.clip(adv + scale * noise + pull * delta, 0.0, 1.0)
        cand_mse = _mse(cand, x)
        if cand_mse <= current_mse and attack_success(
            target, cand, e_ref, tau, objective
        ):
            adv = cand
            current_mse = cand_mse
            trace.accepted += 1
            window_hits += 1
        if it % 40 == 0:
            # boundary-attack style step adaptation on the acceptance rate
            rate = window_hits / 40.0
            if rate > 0.5:
                pull = min(pull * 1.3, 0.5)
            elif rate < 0.1:
                pull = max(pull * 0.7, 0.01)
                sigma = max(sigma * 0.85, 0.02)
            window_hits = 0
        while cp_idx < len(cp) and it == cp[cp_idx]:
            trace.checkpoints.append((it, current_mse, True))
            cp_idx += 1
    return adv, trace


# --- random search and sweeps ---------------------------------------------------


def random_search_ball(target, x_probe, x_ref, objective, tau, epsilon,
                       n_samples, rng):
    """Uniform sampling in the L-infinity ball; reports whether any sample
    flips the decision."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x_probe, dtype=np.float64).reshape(-1)
    e_ref = target.embed_ref(x_ref)
    found = False
    flips = 0
    best = None
    best_score = -np.inf
    for i in range(n_samples):
        if epsilon == 0:
            cand = x.copy()
        else:
            u = rng.derive(f"s/{i}").uniform(x.size) * 2.0 - 1.0
            cand = np.clip(x + epsilon * u, 0.0, 1.0)
        s = target.deployed_similarity(cand, e_ref)
        score = -s if objective == DODGING else s
        if score > best_score:
            best_score, best = score, cand
        ok = s <= tau if objective == DODGING else s > tau
        if ok:
            found = True
            flips += 1
    return {"found": found, "flips": flips, "best": best}


def intensity_sweep(attack_fn, target, pairs_with_refs, intensities, tau,
                    seed=0):
    """Success rate of an attack at each intensity; rates and 3-sigma
    binomial error bars, for the monotonicity and saturation audits."""
    if list(intensities) != sorted(intensities):
        raise ValueError("intensities must ascend")
    rates = []
    for level in intensities:
        hits = 0
        for idx, (x_probe, x_ref, objective) in enumerate(pairs_with_refs):
            cfg = AttackConfig(intensity=level, objective=objective, seed=seed)
            x_adv, _ = attack_fn(
                target, x_probe, x_ref, cfg, SeededRng(seed, idx)
            )
            e_ref = target.embed_ref(x_ref)
            hits += int(attack_success(target, x_adv, e_ref, tau, objective))
        rates.append(hits / len(pairs_with_refs))
    n = len(pairs_with_refs)
    bars = [3.0 * np.sqrt(max(r * (1 - r), 1e-12) / n) for r in rates]
    return {"intensities": list(intensities), "success_rates": rates,
            "three_sigma": bars}


# --- artifact output --------------------------------------------------------------


def save_adversarial(path_stem, image, meta, h, w):
    """PGM image plus a JSON sidecar with config, seed, budget, and outcome."""
    write_pgm(f"{path_stem}.pgm", np.asarray(image).reshape(h, w))
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True, default=float)
