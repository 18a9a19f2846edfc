"""Protocol-level experiments over a trained pipeline.

Each function takes a Pipeline (dataset + recognizer + basis + defense +
calibrated threshold) and returns plain dicts of rows and metadata, so the
CLI can serialize them and tests can assert on them directly. Heavy per-pair
loops optionally fan out over processes with a deterministic, index-ordered
reduction.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass

import numpy as np

from pinact import attacks, data, defense, pca, recognizer
from pinact.attacks import (
    DODGING,
    IMPERSONATION,
    AttackConfig,
    AttackTarget,
)
from pinact.linalg import SeededRng

EVAL_SEED = 99


@dataclass
class Pipeline:
    dataset: object
    model: object
    basis: object
    pin: object
    tau: float
    reward_history: list

    def hashes(self):
        return {
            "recognizer": self.model.checkpoint_hash()[:16],
            "basis": pca.basis_hash(self.basis)[:16],
            "agent": self.pin.checkpoint_hash()[:16],
        }


def build_pipeline(dataset_config=None, recognizer_config=None, pin_config=None,
                   n_components=256, dae_params=None):
    """Stage-ordered build: data, recognizer, basis, selection agent, and the
    verification threshold calibrated for >= 99% clean TPR on held-out pairs."""
    ds = data.generate_dataset(dataset_config)
    train_imgs = ds.split_images("recognizer_train")
    train_labels = np.array(
        [ds.labels[i] for i in ds.split_ids("recognizer_train")]
    )
    model = recognizer.train_recognizer(train_imgs, train_labels, recognizer_config)
    basis = pca.fit(ds.split_images("basis_fit"), n_components)
    if pin_config is None:
        pin_config = defense.PinConfig(n_components=n_components)
    pin, history = defense.train(
        ds.split_images("pin_train"), basis, pin_config, dae_params=dae_params
    )
    # threshold from held-out clean pairs (training pairs would overstate it)
    calib_pairs = data.make_pairs(ds, 150, 0, SeededRng(ds.config.seed, 909),
                                  split="pin_train")
    pos, _ = recognizer.pair_scores(model, ds, calib_pairs)
    tau = recognizer.calibrate_threshold(pos, 0.99)
    return Pipeline(ds, model, basis, pin, tau, history)


def eval_pair_set(pipe, n_pos, n_neg, seed=5):
    return data.make_pairs(pipe.dataset, n_pos, n_neg, SeededRng(seed, 1))


def pair_objective(label):
    return DODGING if label else IMPERSONATION


# --- defended / undefended scoring -------------------------------------------


def score_pairs(pipe, pairs, probes=None, defended=False):
    """Similarity scores; the probe (first image) may be replaced and may be
    routed through the deployed defense."""
    ds = pipe.dataset
    target = AttackTarget(
        pipe.model,
        pipe.pin if defended else None,
        eval_mode=defense.stochastic_mode(EVAL_SEED),
    )
    pos, neg = [], []
    for idx, (a, b, label) in enumerate(pairs):
        x = probes[idx] if probes is not None else ds.images[a]
        e_ref = target.embed_ref(ds.images[b])
        s = target.deployed_similarity(x, e_ref, SeededRng(EVAL_SEED, idx))
        (pos if label else neg).append(s)
    return np.array(pos), np.array(neg)


def eer_for(pipe, pairs, probes=None, defended=False):
    pos, neg = score_pairs(pipe, pairs, probes, defended)
    return recognizer.compute_metrics(pos, neg).eer


# --- attack crafting -----------------------------------------------------------


_ATTACK_FNS = {"fgsm": attacks.fgsm, "ifgsm": attacks.ifgsm, "pgd": attacks.pgd}

_WORKER = {}


def _craft_one(idx):
    pipe, pairs, name, protocol, cfg_proto = (
        _WORKER["pipe"],
        _WORKER["pairs"],
        _WORKER["name"],
        _WORKER["protocol"],
        _WORKER["cfg"],
    )
    a, b, label = pairs[idx]
    ds = pipe.dataset
    target = AttackTarget(
        pipe.model,
        pipe.pin if protocol == "online" else None,
        online=protocol == "online",
        grad_mode=_WORKER["grad_mode"],
    )
    cfg = AttackConfig(
        intensity=cfg_proto.intensity,
        epsilon=cfg_proto.epsilon,
        steps=cfg_proto.steps,
        step_size=cfg_proto.step_size,
        objective=pair_objective(label),
        seed=cfg_proto.seed,
    )
    rng = SeededRng(cfg.seed, idx)
    if name == "deepfool":
        adv, info = attacks.deepfool_similarity(
            target,
            ds.images[a],
            ds.images[b],
            cfg.objective,
            _WORKER["tau"],
            max_iter=cfg.steps,
            rng=rng,
        )
    else:
        adv, info = _ATTACK_FNS[name](target, ds.images[a], ds.images[b], cfg, rng)
    return adv, info.get("realized_intensity", float("nan"))


def craft_adversarials(pipe, pairs, name, protocol, cfg, jobs=1):
    """Adversarial probe per pair. Offline targets carry no defense object at
    all, so the attacker cannot read defense parameters by construction."""
    grad_mode = defense.reparam_mode(cfg.seed) if protocol == "online" else None
    _WORKER.update(
        pipe=pipe, pairs=pairs, name=name, protocol=protocol, cfg=cfg,
        grad_mode=grad_mode, tau=pipe.tau,
    )
    indices = range(len(pairs))
    if jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(jobs) as pool:
            results = pool.map(_craft_one, indices, chunksize=8)
    else:
        results = [_craft_one(i) for i in indices]
    advs = [r[0] for r in results]
    intensities = [r[1] for r in results]
    return advs, intensities


def deepfool_pairs(pipe, pairs):
    """DeepFool's precondition filter: drop pairs already misclassified at tau."""
    keep = []
    for idx, (a, b, label) in enumerate(pairs):
        s = recognizer.similarity(
            recognizer.embed(pipe.model, pipe.dataset.images[a]),
            recognizer.embed(pipe.model, pipe.dataset.images[b]),
        )
        correct = s > pipe.tau if label else s <= pipe.tau
        if correct:
            keep.append(pairs[idx])
    return keep


# --- experiments ------------------------------------------------------------------


def subspace_study(pipe, n_pairs=8, n_draws=2000, top_k=64, intensity=0.04,
                   seed=7, regions=("bottom", "middle", "top", "full")):
    """Similarity distributions under region-restricted noise, before and
    after a fixed top-K projection, aggregated over a small pair sample."""
    pairs = eval_pair_set(pipe, n_pairs, n_pairs, seed=seed)
    rows = []
    hists = {}
    variances = {1: {}, 0: {}}
    reduced_all = True
    for label_filter in (1, 0):
        chosen = [p for p in pairs if p[2] == label_filter][:n_pairs]
        for region in regions:
            mask = data.region_mask(
                region, pipe.dataset.config.height, pipe.dataset.config.width
            )
            before_var, after_var = [], []
            all_before, all_after = [], []
            for pi, (a, b, _) in enumerate(chosen):
                xa = pipe.dataset.images[a]
                e_ref = recognizer.embed(pipe.model, pipe.dataset.images[b])
                rng = SeededRng(seed, 1000 + pi if label_filter else 2000 + pi)
                sims, sims_proj = [], []
                for i in range(n_draws):
                    xn = data.add_noise_at_intensity(
                        xa, intensity, rng.derive(f"{region}/{i}"), mask
                    )
                    sims.append(
                        recognizer.similarity(recognizer.embed(pipe.model, xn), e_ref)
                    )
                    xp = pca.classical_pca_defend(pipe.basis, top_k, xn)
                    sims_proj.append(
                        recognizer.similarity(recognizer.embed(pipe.model, xp), e_ref)
                    )
                before_var.append(float(np.var(sims)))
                after_var.append(float(np.var(sims_proj)))
                all_before.extend(sims)
                all_after.extend(sims_proj)
                if after_var[-1] >= before_var[-1]:
                    reduced_all = False
            key = ("positive" if label_filter else "negative", region)
            hists[key] = {
                "before": np.histogram(all_before, bins=60, range=(-1, 1)),
                "after": np.histogram(all_after, bins=60, range=(-1, 1)),
            }
            variances[label_filter][region] = float(np.mean(before_var))
            rows.append(
                {
                    "pair_type": key[0],
                    "region": region,
                    "mean_variance_before": float(np.mean(before_var)),
                    "mean_variance_after": float(np.mean(after_var)),
                }
            )
    ratios = {}
    for label_filter, name in ((1, "positive"), (0, "negative")):
        band_vars = [variances[label_filter][r] for r in ("bottom", "middle", "top")]
        ratios[name] = float(max(band_vars) / min(band_vars))
    return {
        "rows": rows,
        "histograms": hists,
        "region_variance_ratio": ratios,
        "projection_reduced_every_case": reduced_all,
        "n_pairs_per_type": n_pairs,
        "n_draws": n_draws,
    }


def attack_eval(pipe, attack_names=("fgsm", "ifgsm", "pgd", "deepfool"),
                protocols=("offline", "online"), n_pos=200, n_neg=200,
                intensity=0.04, pgd_epsilon=0.02, steps=10, seed=5, jobs=1):
    """EER table per attack and protocol, plus defended/undefended clean rows.

    Adversarial perturbations are applied to the first image of each pair;
    the second stays clean. Defended numbers always route the probe through
    the deployed defense, whatever the attacker knew.
    """
    pairs = eval_pair_set(pipe, n_pos, n_neg, seed=seed)
    cleans = [pipe.dataset.images[p[0]] for p in pairs]
    rows = [
        {
            "attack": "clean",
            "protocol": "none",
            "eer_undefended": eer_for(pipe, pairs, cleans, defended=False),
            "eer_defended": eer_for(pipe, pairs, cleans, defended=True),
            "mean_realized_intensity": 0.0,
        }
    ]
    for name in attack_names:
        for protocol in protocols:
            use_pairs = pairs
            if name == "deepfool":
                use_pairs = deepfool_pairs(pipe, pairs)
            cfg = AttackConfig(
                intensity=intensity,
                epsilon=pgd_epsilon,
                steps=1 if name == "fgsm" else steps,
                objective=DODGING,
                seed=seed,
            )
            advs, realized = craft_adversarials(
                pipe, use_pairs, name, protocol, cfg, jobs
            )
            rows.append(
                {
                    "attack": name,
                    "protocol": protocol,
                    "eer_undefended": eer_for(pipe, use_pairs, advs, defended=False),
                    "eer_defended": eer_for(pipe, use_pairs, advs, defended=True),
                    "mean_realized_intensity": float(np.nanmean(realized)),
                }
            )
    return {"rows": rows, "tau": pipe.tau, "n_pairs": len(pairs)}


def gradient_audit(pipe, n_pairs=120, intensity=0.04, seed=5, jobs=1,
                   sweep_levels=(0.04, 0.06, 0.08, 0.1, 0.2, 0.3, 0.5, 0.75),
                   rs_epsilon=0.01, rs_samples=100_000, rs_max_pairs=3,
                   strict_tau=0.0, pgd100_pairs=40):
    """The obfuscated-gradient battery.

    (i) iterative online beats one-step online; (ii) transferred offline
    adversarials do no better than the online white-box attack; (iii)/(iv)
    success grows monotonically with intensity and saturates at 100%;
    (v) brute-force random sampling finds nothing where online PGD fails;
    plus the BPDA-vs-straight-through comparison and a high-iteration PGD row.
    """
    pairs = eval_pair_set(pipe, n_pairs, n_pairs, seed=seed)
    results = {}

    cfg1 = AttackConfig(intensity=intensity, steps=1, seed=seed)
    cfg5 = AttackConfig(intensity=intensity, steps=5, seed=seed)
    fgsm_on, _ = craft_adversarials(pipe, pairs, "fgsm", "online", cfg1, jobs)
    ifgsm_on, _ = craft_adversarials(pipe, pairs, "ifgsm", "online", cfg5, jobs)
    fgsm_off, _ = craft_adversarials(pipe, pairs, "fgsm", "offline", cfg1, jobs)
    eer_fgsm_on = eer_for(pipe, pairs, fgsm_on, defended=True)
    eer_ifgsm_on = eer_for(pipe, pairs, ifgsm_on, defended=True)
    eer_transfer = eer_for(pipe, pairs, fgsm_off, defended=True)
    results["condition_i"] = {
        "one_step_online_eer": eer_fgsm_on,
        "iterative_online_eer": eer_ifgsm_on,
        "passed": eer_ifgsm_on >= eer_fgsm_on,
    }
    results["condition_ii"] = {
        "transfer_eer": eer_transfer,
        "online_whitebox_eer": eer_fgsm_on,
        "passed": eer_transfer <= eer_fgsm_on,
    }

    # (iii)/(iv): online FGSM success on positive pairs vs. intensity
    target_on = AttackTarget(
        pipe.model, pipe.pin, online=True,
        grad_mode=defense.reparam_mode(seed),
        eval_mode=defense.stochastic_mode(EVAL_SEED),
    )
    pos_pairs = [p for p in pairs if p[2] == 1][: max(60, n_pairs // 2)]
    triples = [
        (pipe.dataset.images[a], pipe.dataset.images[b], DODGING)
        for a, b, _ in pos_pairs
    ]
    sweep = attacks.intensity_sweep(
        attacks.fgsm, target_on, triples, list(sweep_levels), pipe.tau, seed=seed
    )
    rates = sweep["success_rates"]
    bars = sweep["three_sigma"]
    monotone = all(
        rates[i + 1] >= rates[i] - max(bars[i], bars[i + 1])
        for i in range(len(rates) - 1)
    )
    results["condition_iii_iv"] = {
        **sweep,
        "monotone_within_3sigma": monotone,
        "top_reaches_one": rates[-1] == 1.0,
        "passed": monotone and rates[-1] == 1.0,
    }

    # (v): random search where strict-threshold online PGD fails
    rs_rows = []
    checked = 0
    for idx, (a, b, label) in enumerate(pos_pairs):
        if checked >= rs_max_pairs:
            break
        xa, xb = pipe.dataset.images[a], pipe.dataset.images[b]
        cfg = AttackConfig(epsilon=rs_epsilon, steps=20, objective=DODGING,
                           seed=seed)
        adv, _ = attacks.pgd(target_on, xa, xb, cfg, SeededRng(seed, 7000 + idx))
        e_ref = target_on.embed_ref(xb)
        pgd_ok = attacks.attack_success(target_on, adv, e_ref, strict_tau, DODGING)
        if pgd_ok:
            continue
        checked += 1
        rs = attacks.random_search_ball(
            target_on, xa, xb, DODGING, strict_tau, rs_epsilon, rs_samples,
            SeededRng(seed, 8000 + idx),
        )
        rs_rows.append({"pair": idx, "pgd_succeeded": False,
                        "random_found": rs["found"], "flips": rs["flips"]})
    results["condition_v"] = {
        "rows": rs_rows,
        "samples_per_pair": rs_samples,
        "passed": bool(rs_rows) and not any(r["random_found"] for r in rs_rows),
    }

    # BPDA vs straight-through, plus high-iteration PGD
    bpda_target = AttackTarget(
        pipe.model, pipe.pin, online=True, grad_mode=defense.bpda_mode(),
        eval_mode=defense.stochastic_mode(EVAL_SEED),
    )
    bpda_advs = []
    for idx, (a, b, label) in enumerate(pairs):
        cfg = AttackConfig(intensity=intensity, steps=1,
                           objective=pair_objective(label), seed=seed)
        adv, _ = attacks.fgsm(bpda_target, pipe.dataset.images[a],
                              pipe.dataset.images[b], cfg, SeededRng(seed, idx))
        bpda_advs.append(adv)
    eer_bpda = eer_for(pipe, pairs, bpda_advs, defended=True)
    results["bpda"] = {
        "straight_through_eer": eer_fgsm_on,
        "bpda_eer": eer_bpda,
        "gap_points": 100.0 * (eer_bpda - eer_fgsm_on),
    }

    sub = pairs[:pgd100_pairs]
    cfg100 = AttackConfig(epsilon=0.02, steps=100, seed=seed)
    pgd100, _ = craft_adversarials(pipe, sub, "pgd", "online", cfg100, jobs)
    results["pgd100"] = {"eer_defended": eer_for(pipe, sub, pgd100, defended=True)}
    return results


def blackbox_eval(pipe, n_pairs=50, iters=2000, checkpoints=(200, 1000, 2000),
                  seed=5):
    """Decision-attack distortion, defended vs. undefended, per pair.

    Pairs the recognizer gets wrong on clean images are skipped, mirroring
    the usual decision-attack protocol."""
    half = eval_pair_set(pipe, n_pairs, n_pairs, seed=seed)
    pairs = [p for duo in zip(half[:n_pairs], half[n_pairs:]) for p in duo]
    defended = AttackTarget(pipe.model, pipe.pin,
                            eval_mode=defense.stochastic_mode(EVAL_SEED))
    bare = AttackTarget(pipe.model)
    rows = []
    used = 0
    for idx, (a, b, label) in enumerate(pairs):
        if used >= n_pairs:
            break
        xa, xb = pipe.dataset.images[a], pipe.dataset.images[b]
        objective = pair_objective(label)
        e_ref = bare.embed_ref(xb)
        ok = True
        for tgt in (bare, defended):
            s_clean = tgt.deployed_similarity(xa, e_ref, SeededRng(EVAL_SEED, idx))
            if not (s_clean > pipe.tau if label else s_clean <= pipe.tau):
                ok = False
        if not ok:
            continue
        used += 1
        row = {"pair": idx, "objective": objective}
        for tag, target in (("undefended", bare), ("defended", defended)):
            try:
                _, trace = attacks.decision_blackbox(
                    target, xa, xb, objective, pipe.tau, iters,
                    SeededRng(seed, 3000 + idx), checkpoints,
                )
                row[f"{tag}_final_mse"] = trace.final_mse()
                row[f"{tag}_trace"] = trace.checkpoints
            except RuntimeError:
                row[f"{tag}_final_mse"] = float("nan")
                row[f"{tag}_trace"] = []
        if np.isfinite(row["undefended_final_mse"]) and np.isfinite(
            row["defended_final_mse"]
        ):
            rows.append(row)
    ratios = [r["defended_final_mse"] / r["undefended_final_mse"] for r in rows]
    return {
        "rows": rows,
        "median_distortion_ratio": float(np.median(ratios)) if ratios else float("nan"),
        "n_pairs_used": len(rows),
    }


def sticker_eval(pipe, spec=None, n_gallery=75, target_ident=0, seed=5,
                 tau_margin=0.05):
    """Universal-patch campaign: undefended vs. online-optimized-vs-defense.

    The match threshold is set just above the highest clean gallery-to-target
    similarity, so every clean gallery image verifies correctly (the patched
    error rate is then entirely the patch's doing)."""
    spec = spec or attacks.StickerSpec()
    ds = pipe.dataset
    eval_ids = pipe.dataset.split_ids("eval")
    target_images = [i for i in eval_ids if ds.labels[i] == target_ident]
    gallery_ids = [i for i in eval_ids if ds.labels[i] != target_ident]
    gallery = [ds.images[i] for i in gallery_ids[:n_gallery]]
    x_target = ds.images[target_images[0]]

    bare = AttackTarget(pipe.model)
    e_t = bare.embed_ref(x_target)
    clean_sims = [bare.deployed_similarity(g, e_t) for g in gallery]
    tau = max(pipe.tau, max(clean_sims) + tau_margin)
    clean_rate = float(np.mean([s > tau for s in clean_sims]))
    _, info_bare = attacks.sticker_attack(bare, gallery, x_target, spec,
                                          tau, seed=seed)

    online = AttackTarget(
        pipe.model, pipe.pin, online=True,
        grad_mode=defense.reparam_mode(seed),
        eval_mode=defense.stochastic_mode(EVAL_SEED),
    )
    _, info_online = attacks.sticker_attack(online, gallery, x_target, spec,
                                            tau, seed=seed)
    return {
        "clean_false_match_rate": clean_rate,
        "undefended_error_rate": info_bare["error_rate"],
        "defended_online_error_rate": info_online["error_rate"],
        "region": (spec.top, spec.left, spec.height, spec.width),
        "tau": tau,
    }


def classical_ablation(pipe, pipe_dae=None, n_pos=200, n_neg=200,
                       small_k=12, large_k=205, intensity=0.04, seed=5, jobs=1):
    """Learnable selection vs. fixed top-K selection, plus the DAE on/off
    comparison when a DAE pipeline is supplied."""
    pairs = eval_pair_set(pipe, n_pos, n_neg, seed=seed)
    cleans = [pipe.dataset.images[p[0]] for p in pairs]
    cfg = AttackConfig(intensity=intensity, steps=1, seed=seed)
    advs, _ = craft_adversarials(pipe, pairs, "fgsm", "offline", cfg, jobs)

    def classical_eer(probes, k):
        transformed = [pca.classical_pca_defend(pipe.basis, k, x) for x in probes]
        return eer_for(pipe, pairs, transformed, defended=False)

    rows = [
        {
            "defense": "learnable",
            "clean_eer": eer_for(pipe, pairs, cleans, defended=True),
            "attacked_eer": eer_for(pipe, pairs, advs, defended=True),
        },
        {
            "defense": f"pca_{small_k}",
            "clean_eer": classical_eer(cleans, small_k),
            "attacked_eer": classical_eer(advs, small_k),
        },
        {
            "defense": f"pca_{large_k}",
            "clean_eer": classical_eer(cleans, large_k),
            "attacked_eer": classical_eer(advs, large_k),
        },
    ]
    out = {"rows": rows}
    if pipe_dae is not None:
        # offline adversarials depend only on the (identical) bare model
        out["dae_comparison"] = {
            "clean_gap_points": 100.0 * abs(
                eer_for(pipe_dae, pairs, cleans, defended=True)
                - rows[0]["clean_eer"]
            ),
            "attacked_gap_points": 100.0 * abs(
                eer_for(pipe_dae, pairs, advs, defended=True)
                - rows[0]["attacked_eer"]
            ),
        }
    return out
