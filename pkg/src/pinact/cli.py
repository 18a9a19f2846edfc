"""Command-line frontend: each experiment is one re-runnable subcommand.

    pinact gen-data          synthesize the identity dataset (PGM + manifest)
    pinact train-recognizer  train the embedding model
    pinact fit-pca           fit the component basis from clean images
    pinact train-pin         train the selection agent (policy gradient)
    pinact subspace-study    region-noise similarity distributions
    pinact attack-eval       EER table across attacks and protocols
    pinact audit-gradients   obfuscated-gradient battery
    pinact report            aggregate everything in the output directory

Global flags: --config <json>, --seed <u64>, --out <dir>, --jobs <n>.
Stages are resumable: a stage whose artifact already matches its config is a
no-op. Config file format: JSON with a schema_version field; any omitted key
falls back to the documented default (see configs/default.json).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from pinact import attacks, data, defense, experiments, pca, recognizer, report
from pinact.linalg import SeededRng

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 2024,
    "dataset": {},
    "basis": {"n_components": 256},
    "recognizer": {},
    "defense": {},
    "attacks": {
        "names": ["fgsm", "ifgsm", "pgd", "deepfool"],
        "protocols": ["offline", "online"],
        "n_pos": 200,
        "n_neg": 200,
        "intensity": 0.04,
        "pgd_epsilon": 0.02,
        "steps": 10,
        "save_adversarials": 4,
    },
    "subspace_study": {"n_pairs": 8, "n_draws": 2000, "top_k": 64},
    "audit": {"n_pairs": 120, "rs_samples": 100000, "rs_max_pairs": 3},
    "blackbox": {"n_pairs": 50, "iters": 2000},
    "sticker": {"n_gallery": 75},
}


def load_config(path, seed_override=None):
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        with open(path) as fh:
            user = json.load(fh)
        if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise SystemExit(
                f"config schema_version {user.get('schema_version')} unsupported"
            )
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
    if seed_override is not None:
        config["seed"] = seed_override
    return config


def _dataset_config(config):
    payload = dict(config["dataset"])
    payload.setdefault("seed", config["seed"])
    return data.DatasetConfig(**payload)


def _artifact(out, name):
    return Path(out) / name


def _say(msg):
    print(msg, flush=True)


# --- stage loading -------------------------------------------------------------


def _require(path, build_cmd):
    if not path.exists():
        raise SystemExit(
            f"missing artifact {path}; build it first with `pinact {build_cmd}`"
        )
    return path


def load_stage_dataset(config, out):
    _require(_artifact(out, "manifest.json"), "gen-data")
    return data.load_dataset(Path(out))


def load_stage_recognizer(config, out, dataset):
    path = _require(_artifact(out, "recognizer.imnn"), "train-recognizer")
    with open(_artifact(out, "recognizer.json")) as fh:
        meta = json.load(fh)
    return recognizer.load_recognizer(
        path, meta["n_identities"], meta["height"], meta["width"], meta["emb_dim"]
    )


def load_stage_basis(config, out):
    return pca.load_basis(_require(_artifact(out, "basis.impb"), "fit-pca"))


def load_pipeline(config, out):
    ds = load_stage_dataset(config, out)
    model = load_stage_recognizer(config, out, ds)
    basis = load_stage_basis(config, out)
    pin = defense.load_defense(_artifact(out, "defense"), basis)
    calib = data.make_pairs(ds, 150, 0, SeededRng(ds.config.seed, 909),
                            split="pin_train")
    pos, _ = recognizer.pair_scores(model, ds, calib)
    tau = recognizer.calibrate_threshold(pos, 0.99)
    history = []
    curve = _artifact(out, "defense") / "reward_curve.csv"
    if curve.exists():
        for line in curve.read_text().splitlines()[1:]:
            epoch, r, frac = line.split(",")
            history.append((int(epoch), float(r), float(frac)))
    return experiments.Pipeline(ds, model, basis, pin, tau, history)


# --- subcommands ------------------------------------------------------------------


def cmd_gen_data(config, out, jobs):
    out = Path(out)
    manifest_path = out / "manifest.json"
    cfg = _dataset_config(config)
    if manifest_path.exists():
        with open(manifest_path) as fh:
            existing = json.load(fh)
        if existing.get("seed") == cfg.seed:
            _say(f"dataset already present (seed {cfg.seed}); nothing to do")
            return
    ds = data.generate_dataset(cfg)
    data.save_dataset(ds, out)
    _say(
        f"wrote {len(ds.images)} images ({cfg.identities} identities x "
        f"{cfg.images_per_identity}) and manifest to {out}"
    )


def cmd_train_recognizer(config, out, jobs):
    out = Path(out)
    target = out / "recognizer.imnn"
    rec_cfg = recognizer.RecognizerConfig(**config["recognizer"])
    if target.exists():
        _say("recognizer checkpoint already present; nothing to do")
        return
    ds = load_stage_dataset(config, out)
    imgs = ds.split_images("recognizer_train")
    labels = np.array([ds.labels[i] for i in ds.split_ids("recognizer_train")])
    model = recognizer.train_recognizer(
        imgs, labels, rec_cfg, ds.config.height, ds.config.width
    )
    recognizer.save_recognizer(target, model)
    with open(out / "recognizer.json", "w") as fh:
        json.dump(
            {
                "n_identities": int(labels.max()) + 1,
                "emb_dim": rec_cfg.emb_dim,
                "height": ds.config.height,
                "width": ds.config.width,
                "checkpoint_hash": model.checkpoint_hash(),
            },
            fh,
            indent=1,
            sort_keys=True,
        )
    _say(f"trained recognizer -> {target}")


def cmd_fit_pca(config, out, jobs):
    out = Path(out)
    target = out / "basis.impb"
    if target.exists():
        _say("basis already present; nothing to do")
        return
    ds = load_stage_dataset(config, out)
    basis = pca.fit(ds.split_images("basis_fit"), config["basis"]["n_components"])
    pca.save_basis(target, basis)
    _say(
        f"fit basis with {basis.n_components} components over "
        f"{len(ds.split_ids('basis_fit'))} images -> {target}"
    )


def cmd_train_pin(config, out, jobs):
    out = Path(out)
    target = out / "defense"
    if (target / "agent.imnn").exists():
        _say("defense checkpoint already present; nothing to do")
        return
    ds = load_stage_dataset(config, out)
    basis = load_stage_basis(config, out)
    pin_cfg = defense.PinConfig(
        **{"n_components": basis.n_components, **config["defense"]}
    )
    dae_params = None
    if pin_cfg.dae_enabled:
        dae_params = defense.dae_pretrain(
            ds.split_images("pin_train"), pin_cfg,
            SeededRng(pin_cfg.seed, 17),
        )
    pin, history = defense.train(
        ds.split_images("pin_train"), basis, pin_cfg, dae_params=dae_params
    )
    defense.save_defense(target, pin, history, basis_path=out / "basis.impb")
    _say(
        f"trained selection agent for {pin_cfg.epochs} epochs "
        f"(final mean reward {history[-1][1]:.3f}) -> {target}"
    )


def cmd_subspace_study(config, out, jobs):
    pipe = load_pipeline(config, out)
    params = config["subspace_study"]
    result = experiments.subspace_study(
        pipe,
        n_pairs=params.get("n_pairs", 8),
        n_draws=params.get("n_draws", 2000),
        top_k=params.get("top_k", 64),
        seed=config["seed"],
    )
    writer = report.ReportWriter(
        Path(out) / "subspace_study", config, pipe.hashes()
    )
    writer.table("region_variances", result["rows"])
    writer.json_blob(
        "summary",
        {
            "region_variance_ratio": result["region_variance_ratio"],
            "projection_reduced_every_case": result["projection_reduced_every_case"],
            "n_pairs_per_type": result["n_pairs_per_type"],
            "n_draws": result["n_draws"],
        },
    )
    for (pair_type, region), hists in result["histograms"].items():
        for stage in ("before", "after"):
            counts, edges = hists[stage]
            writer.histogram(f"hist_{pair_type}_{region}_{stage}", counts, edges)
    writer.finalize()
    _say(
        f"region variance ratios {result['region_variance_ratio']}; "
        f"projection reduced variance in every case: "
        f"{result['projection_reduced_every_case']}"
    )


def cmd_attack_eval(config, out, jobs):
    pipe = load_pipeline(config, out)
    params = config["attacks"]
    result = experiments.attack_eval(
        pipe,
        attack_names=tuple(params["names"]),
        protocols=("offline", "online"),
        n_pos=params["n_pos"],
        n_neg=params["n_neg"],
        intensity=params["intensity"],
        pgd_epsilon=params["pgd_epsilon"],
        steps=params["steps"],
        seed=config["seed"],
        jobs=jobs,
    )
    writer = report.ReportWriter(Path(out) / "attack_eval", config, pipe.hashes())
    writer.table("eer_table", result["rows"])
    writer.json_blob("summary", result)
    _save_example_adversarials(pipe, params, config, Path(out) / "attack_eval")
    writer.finalize()
    for row in result["rows"]:
        _say(
            f"{row['attack']:>9s}/{row['protocol']:<8s} "
            f"EER undefended {row['eer_undefended']:.3f} "
            f"defended {row['eer_defended']:.3f}"
        )


def _save_example_adversarials(pipe, params, config, out_dir):
    count = int(params.get("save_adversarials", 0))
    if count <= 0:
        return
    pairs = experiments.eval_pair_set(pipe, count, 0, seed=config["seed"])
    cfg = attacks.AttackConfig(
        intensity=params["intensity"], steps=1, seed=config["seed"]
    )
    advs, intensities = experiments.craft_adversarials(
        pipe, pairs, "fgsm", "offline", cfg, jobs=1
    )
    h, w = pipe.dataset.config.height, pipe.dataset.config.width
    for i, (adv, inten) in enumerate(zip(advs, intensities)):
        attacks.save_adversarial(
            out_dir / f"adversarial_{i:02d}",
            adv,
            {
                "attack": "fgsm",
                "protocol": "offline",
                "pair": list(pairs[i][:2]),
                "seed": config["seed"],
                "intensity_budget": params["intensity"],
                "realized_intensity": inten,
                "success": None,
                "query_count": 1,
            },
            h,
            w,
        )


def cmd_audit_gradients(config, out, jobs):
    pipe = load_pipeline(config, out)
    params = config["audit"]
    result = experiments.gradient_audit(
        pipe,
        n_pairs=params.get("n_pairs", 120),
        seed=config["seed"],
        jobs=jobs,
        rs_samples=params.get("rs_samples", 100000),
        rs_max_pairs=params.get("rs_max_pairs", 3),
    )
    writer = report.ReportWriter(
        Path(out) / "audit_gradients", config, pipe.hashes()
    )
    writer.json_blob("audit", result)
    rows = []
    for name in ("condition_i", "condition_ii", "condition_iii_iv", "condition_v"):
        rows.append({"condition": name, "passed": result[name]["passed"]})
    writer.table("conditions", rows)
    writer.finalize()
    for row in rows:
        _say(f"{row['condition']}: {'pass' if row['passed'] else 'FAIL'}")
    _say(
        f"bpda gap {result['bpda']['gap_points']:.2f} points "
        f"(straight-through {result['bpda']['straight_through_eer']:.3f}, "
        f"bpda {result['bpda']['bpda_eer']:.3f})"
    )


def cmd_report(config, out, jobs):
    out = Path(out)
    summary = {}
    for sub in ("subspace_study", "attack_eval", "audit_gradients"):
        blob = out / sub / ("summary.json" if sub != "audit_gradients" else "audit.json")
        if blob.exists():
            with open(blob) as fh:
                summary[sub] = json.load(fh)
    if not summary:
        raise SystemExit(f"no experiment outputs under {out}; run the study "
                         "subcommands first")
    writer = report.ReportWriter(out / "report", config)
    writer.json_blob("combined", summary)
    writer.finalize()
    _say(f"aggregated {len(summary)} experiment blocks -> {out / 'report'}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-recognizer": cmd_train_recognizer,
    "fit-pca": cmd_fit_pca,
    "train-pin": cmd_train_pin,
    "subspace-study": cmd_subspace_study,
    "attack-eval": cmd_attack_eval,
    "audit-gradients": cmd_audit_gradients,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pinact",
        description="projection-based input purification defense workbench",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--out", default="out", help="artifact directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    args = parser.parse_args(argv)
    config = load_config(args.config, args.seed)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](config, args.out, max(1, args.jobs))
    return 0


if __name__ == "__main__":
    sys.exit(main())
