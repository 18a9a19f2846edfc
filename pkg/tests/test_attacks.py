import numpy as np
import pytest

from pinact import attacks, defense, nn, pca, recognizer
from pinact.attacks import (
    AttackConfig,
    AttackTarget,
    DistortionTrace,
    StickerSpec,
    attack_success,
    decision_blackbox,
    deepfool_similarity,
    fgsm,
    ifgsm,
    pair_objective_grad,
    pgd,
    random_search_ball,
)
from pinact.linalg import SeededRng


def linear_model(w=None, d=2):
    """Two-pixel recognizer whose embedding is the L2-normalized linear map,
    so every gradient is hand-checkable."""
    layers = [nn.Flatten(), nn.Affine(d, d)]
    n_trunk = len(layers)
    layers.append(nn.Affine(d, 2))
    spec = nn.NetworkSpec(layers, (1, 1, d))
    params = nn.init_params(spec, SeededRng(0, 0))
    params[1]["w"] = w if w is not None else np.eye(d)
    params[1]["b"] = np.zeros(d)
    return recognizer.RecognizerModel(spec, params, n_trunk, 1, d)


@pytest.fixture(scope="module")
def small_world():
    """32x32 recognizer + defense trained only enough to be functional."""
    from pinact import data

    ds = data.generate_dataset()
    imgs = ds.split_images("recognizer_train")
    labels = np.array([ds.labels[i] for i in ds.split_ids("recognizer_train")])
    model = recognizer.train_recognizer(
        imgs, labels, recognizer.RecognizerConfig(epochs=6, min_epochs=2,
                                                  target_acc=2.0, min_acc=0.0)
    )
    basis = pca.fit(ds.split_images("basis_fit"), 64)
    pin, _ = defense.train(
        ds.split_images("pin_train"),
        basis,
        defense.PinConfig(n_components=64, epochs=3, mc_samples=4),
    )
    pairs = data.make_pairs(ds, 12, 12, SeededRng(5, 1))
    return ds, model, pin, pairs


def test_fgsm_zero_intensity_is_identity(small_world):
    ds, model, _, pairs = small_world
    a, b, _ = pairs[0]
    target = AttackTarget(model)
    adv, info = fgsm(target, ds.images[a], ds.images[b],
                     AttackConfig(intensity=0.0))
    assert np.array_equal(adv, ds.images[a])
    assert info["realized_intensity"] == 0.0


def test_fgsm_preclip_intensity_exact(small_world):
    ds, model, _, pairs = small_world
    a, b, _ = pairs[0]
    target = AttackTarget(model)
    adv, info = fgsm(target, ds.images[a], ds.images[b],
                     AttackConfig(intensity=0.04))
    assert info["preclip_intensity"] == pytest.approx(0.04, abs=1e-12)
    assert info["realized_intensity"] <= 0.04 + 1e-9


def test_fgsm_linear_toy_sign_matches_hand_gradient():
    model = linear_model()
    target = AttackTarget(model)
    x = np.array([0.6, 0.3])
    x_ref = np.array([0.2, 0.9])
    e_ref = target.embed_ref(x_ref)
    # s = (x / ||x||) . e_ref; grad = (e_ref - s * x/||x||) / ||x||
    xn = x / np.linalg.norm(x)
    s = float(xn @ e_ref)
    hand = (e_ref - s * xn) / np.linalg.norm(x)
    g = pair_objective_grad(target, x, x_ref, attacks.IMPERSONATION)
    assert np.allclose(g, hand, atol=1e-12)
    g_dodge = pair_objective_grad(target, x, x_ref, attacks.DODGING)
    assert np.allclose(g_dodge, -hand, atol=1e-12)
    adv, _ = fgsm(target, x, x_ref, AttackConfig(intensity=0.1,
                                                 objective=attacks.IMPERSONATION))
    assert np.array_equal(np.sign(adv - x), np.sign(hand))


def test_single_step_pgd_equals_fgsm_at_matching_budget(small_world):
    ds, model, _, pairs = small_world
    a, b, label = pairs[0]
    target = AttackTarget(model)
    x = ds.images[a]
    g = pair_objective_grad(target, x, ds.images[b], attacks.DODGING)
    eps = 0.04 * np.linalg.norm(x) / np.sqrt(np.count_nonzero(np.sign(g)))
    adv_pgd, _ = pgd(target, x, ds.images[b],
                     AttackConfig(epsilon=eps, steps=1, step_size=eps))
    adv_fgsm, _ = fgsm(target, x, ds.images[b], AttackConfig(intensity=0.04))
    assert np.max(np.abs(adv_pgd - adv_fgsm)) < 1e-12


def test_pgd_stays_in_ball(small_world):
    ds, model, pin, pairs = small_world
    a, b, _ = pairs[1]
    target = AttackTarget(model)
    adv, info = pgd(target, ds.images[a], ds.images[b],
                    AttackConfig(epsilon=0.03, steps=8))
    assert info["realized_linf"] <= 0.03 + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_offline_attack_ignores_defense(small_world):
    """Sentinel check: swapping the deployed defense cannot change offline
    adversarials, because the offline attacker never reads it."""
    ds, model, pin, pairs = small_world
    a, b, _ = pairs[0]
    t1 = AttackTarget(model, pin, online=False)
    t2 = AttackTarget(model, None, online=False)
    cfg = AttackConfig(intensity=0.04)
    adv1, _ = fgsm(t1, ds.images[a], ds.images[b], cfg)
    adv2, _ = fgsm(t2, ds.images[a], ds.images[b], cfg)
    assert np.array_equal(adv1, adv2)


def test_online_gradient_requires_defense(small_world):
    _, model, _, _ = small_world
    with pytest.raises(ValueError, match="defense"):
        AttackTarget(model, None, online=True)


def test_attacks_deterministic(small_world):
    ds, model, pin, pairs = small_world
    a, b, _ = pairs[2]
    target = AttackTarget(model, pin, online=True,
                          grad_mode=defense.reparam_mode(3))
    cfg = AttackConfig(intensity=0.04, steps=3, seed=9)
    adv1, _ = ifgsm(target, ds.images[a], ds.images[b], cfg, SeededRng(9, 0))
    adv2, _ = ifgsm(target, ds.images[a], ds.images[b], cfg, SeededRng(9, 0))
    assert np.array_equal(adv1, adv2)


def test_self_pair_gradient_vanishes():
    # at s = 1 the cosine is stationary along the embedding direction
    model = linear_model()
    target = AttackTarget(model)
    x = np.array([0.9, 0.1])
    g = pair_objective_grad(target, x, x, attacks.DODGING)
    assert np.max(np.abs(g)) < 1e-12


def test_deepfool_linear_crosses_in_one_step():
    class FakeLinearTarget:
        w = np.array([0.6, -0.3])

        def embed_ref(self, x_ref):
            return x_ref

        def similarity_grad(self, x, e_ref, rng=None):
            return float(self.w @ x), self.w.copy()

    target = FakeLinearTarget()
    adv, info = deepfool_similarity(target, np.array([0.5, 0.5]),
                                    np.array([0.0, 0.0]), attacks.DODGING,
                                    tau=0.05, max_iter=25)
    assert info["flipped"]
    assert info["iterations"] == 2  # one crossing step, one verification pass
    assert float(target.w @ adv) <= 0.05


def test_deepfool_rejects_wrong_side(small_world):
    ds, model, _, pairs = small_world
    a, b, _ = pairs[0]
    with pytest.raises(ValueError, match="wrong side"):
        deepfool_similarity(AttackTarget(model), ds.images[a], ds.images[b],
                            attacks.DODGING, tau=1.5)


def test_sticker_region_bounds():
    with pytest.raises(ValueError, match="bounds"):
        StickerSpec(top=30, left=0, height=6, width=12).region_slice(32, 32)


def test_sticker_patch_confined(small_world):
    ds, model, _, pairs = small_world
    spec = StickerSpec(steps=4, restarts=1, batch=4)
    gallery = [ds.images[p[0]] for p in pairs[:6]]
    target = AttackTarget(model)
    patch, info = attacks.sticker_attack(target, gallery, ds.images[pairs[0][1]],
                                         spec, tau=0.5, seed=1)
    assert patch.shape == (6, 12)
    stamped = attacks.apply_sticker(gallery[0], patch, spec, 32, 32)
    outside = np.ones((32, 32), dtype=bool)
    rs, cs = spec.region_slice(32, 32)
    outside[rs, cs] = False
    assert np.array_equal(stamped.reshape(32, 32)[outside],
                          gallery[0].reshape(32, 32)[outside])
    assert 0.0 <= info["error_rate"] <= 1.0


def test_blackbox_zero_iters_gives_bootstrap_only(small_world):
    ds, model, _, pairs = small_world
    pos = next(p for p in pairs if p[2] == 1)
    target = AttackTarget(model)
    _, trace = decision_blackbox(target, ds.images[pos[0]], ds.images[pos[1]],
                                 attacks.DODGING, tau=0.4, iters=0,
                                 rng=SeededRng(1, 0))
    assert trace.checkpoints == []
    assert np.isfinite(trace.bootstrap_mse)


def test_blackbox_trace_monotone(small_world):
    ds, model, _, pairs = small_world
    pos = next(p for p in pairs if p[2] == 1)
    target = AttackTarget(model)
    adv, trace = decision_blackbox(target, ds.images[pos[0]], ds.images[pos[1]],
                                   attacks.DODGING, tau=0.4, iters=400,
                                   rng=SeededRng(1, 0),
                                   checkpoints=(50, 100, 200, 400))
    mses = [m for _, m, _ in trace.checkpoints]
    assert all(b <= a + 1e-15 for a, b in zip(mses, mses[1:]))
    assert mses[-1] <= trace.bootstrap_mse
    e_ref = target.embed_ref(ds.images[pos[1]])
    assert attack_success(target, adv, e_ref, 0.4, attacks.DODGING)


def test_blackbox_impersonation_bootstraps_from_reference(small_world):
    ds, model, _, pairs = small_world
    neg = next(p for p in pairs if p[2] == 0)
    target = AttackTarget(model)
    _, trace = decision_blackbox(target, ds.images[neg[0]], ds.images[neg[1]],
                                 attacks.IMPERSONATION, tau=0.4, iters=50,
                                 rng=SeededRng(1, 0), checkpoints=(50,))
    assert np.isfinite(trace.bootstrap_mse)


def test_random_search_zero_epsilon_never_finds(small_world):
    ds, model, _, pairs = small_world
    pos = next(p for p in pairs if p[2] == 1)
    target = AttackTarget(model)
    res = random_search_ball(target, ds.images[pos[0]], ds.images[pos[1]],
                             attacks.DODGING, tau=0.2, epsilon=0.0,
                             n_samples=50, rng=SeededRng(2, 0))
    assert not res["found"]


def test_random_search_huge_epsilon_finds(small_world):
    ds, model, _, pairs = small_world
    pos = next(p for p in pairs if p[2] == 1)
    target = AttackTarget(model)
    res = random_search_ball(target, ds.images[pos[0]], ds.images[pos[1]],
                             attacks.DODGING, tau=0.2, epsilon=1.0,
                             n_samples=400, rng=SeededRng(2, 0))
    assert res["found"]


def test_intensity_sweep_mechanics(small_world):
    ds, model, _, pairs = small_world
    target = AttackTarget(model)
    triples = [(ds.images[a], ds.images[b], attacks.DODGING)
               for a, b, label in pairs if label == 1][:6]
    sweep = attacks.intensity_sweep(fgsm, target, triples, [0.0, 0.2, 0.9],
                                    tau=0.4, seed=0)
    assert sweep["success_rates"][0] == 0.0
    assert len(sweep["success_rates"]) == 3
    with pytest.raises(ValueError, match="ascend"):
        attacks.intensity_sweep(fgsm, target, triples, [0.5, 0.1], tau=0.4)


def test_save_adversarial_sidecar(tmp_path, small_world):
    ds, model, _, pairs = small_world
    attacks.save_adversarial(tmp_path / "adv", ds.images[pairs[0][0]],
                             {"seed": 1, "success": True}, 32, 32)
    assert (tmp_path / "adv.pgm").exists()
    assert (tmp_path / "adv.json").exists()
