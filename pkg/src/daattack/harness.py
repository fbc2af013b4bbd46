"""Experiment orchestration: config files, run directories, and the
dataset/train/attack/sweep/report pipeline stages.

One master seed fans out to labeled sub-seeds (dataset, per-model training,
per-attack crafting, evaluation), so changing one stage's seed never
perturbs another. All artifacts live under a run directory named by the
config hash; every JSON/CSV artifact embeds that hash, and reruns are
idempotent (byte-identical outputs, existing valid model files skipped).
"""

import hashlib
import json
import os
import re

import numpy as np

from .analysis import (
    DEFAULT_GRIDS,
    REPORT_SCHEMA,
    AdversarialSet,
    TransferReport,
    merge_csv,
    perturbation_cosine,
    success_rate,
    sweep,
)
from .attacks import (
    PRESETS,
    Ensemble,
    attack_config,
    load_attack_result,
    run_attack,
    save_attack_result,
)
from .data import GENERATORS, load_dataset, save_dataset
from .errors import ConfigError, DataFormatError
from .transforms import DimSpec
from .nets import (
    TrainConfig,
    TrainMode,
    accuracy,
    build_arch,
    load_model,
    save_model,
    train,
    zoo_architectures,
)
from .rng import sub_seed

_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")

_TOP_KEYS = {"master_seed", "out_dir", "dataset", "zoo", "attacks", "sweeps"}
_DATASET_KEYS = {"kind", "n", "hw", "classes", "path"}
_MODEL_KEYS = {"id", "arch", "mode", "lr", "epochs", "batch_size", "eps", "steps"}
_ATTACKS_KEYS = {"presets", "sources", "eval_count", "workers", "overrides"}
_SWEEP_KEYS = {"parameter", "grid", "preset", "source"}
_OVERRIDE_KEYS = {
    "epsilon", "iters", "alpha", "momentum", "random_start", "aggregate",
    "noise_kind", "sigma", "noise_lo", "noise_hi", "clean_anchor",
    "kernel_radius", "dim_prob", "dim_min_scale",
}


def _reject_unknown(block, allowed, where):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


class ExperimentConfig:
    """Validated flat configuration; `raw` is the canonical hashed form."""

    def __init__(self, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(doc, _TOP_KEYS, "config")
        if "master_seed" not in doc:
            raise ConfigError("master_seed is mandatory")
        self.master_seed = int(doc["master_seed"])
        self.out_dir = doc.get("out_dir", "runs")

        dataset = dict(doc.get("dataset") or {"kind": "rings"})
        _reject_unknown(dataset, _DATASET_KEYS, "dataset")
        if "path" in dataset:
            if len(dataset) > 1:
                raise ConfigError("dataset: path excludes generator keys")
        else:
            kind = dataset.get("kind", "rings")
            if kind not in GENERATORS:
                raise ConfigError(
                    f"unknown dataset kind {kind!r}, have {sorted(GENERATORS)}"
                )
            dataset.setdefault("kind", kind)
            dataset.setdefault("n", 600)
            dataset.setdefault("hw", 16)
            dataset.setdefault("classes", 3 if kind == "rings" else 2)
        self.dataset = dataset

        zoo = doc.get("zoo") or []
        if not zoo:
            raise ConfigError("zoo must list at least one model")
        known_archs = sorted(zoo_architectures(16))
        self.zoo = []
        seen = set()
        for i, spec in enumerate(zoo):
            spec = dict(spec)
            _reject_unknown(spec, _MODEL_KEYS, f"zoo[{i}]")
            mid = spec.get("id")
            if not mid or not _ID_RE.match(mid):
                raise ConfigError(f"zoo[{i}]: id must match {_ID_RE.pattern}")
            if mid in seen:
                raise ConfigError(f"duplicate model id {mid!r}")
            seen.add(mid)
            if spec.get("arch") not in known_archs:
                raise ConfigError(
                    f"zoo[{i}]: arch must be one of {known_archs}"
                )
            mode = spec.setdefault("mode", "normal")
            if mode not in ("normal", "adversarial"):
                raise ConfigError(f"zoo[{i}]: unknown mode {mode!r}")
            if mode == "adversarial":
                if "eps" not in spec or "steps" not in spec:
                    raise ConfigError(f"zoo[{i}]: adversarial needs eps and steps")
            spec.setdefault("lr", 0.1)
            spec.setdefault("epochs", 14 if mode == "adversarial" else 12)
            spec.setdefault("batch_size", 32)
            self.zoo.append(spec)

        attacks = dict(doc.get("attacks") or {})
        _reject_unknown(attacks, _ATTACKS_KEYS, "attacks")
        presets = attacks.setdefault("presets", [])
        for p in presets:
            if p not in PRESETS:
                raise ConfigError(f"unknown attack preset {p!r}")
        attacks.setdefault("sources", [s["id"] for s in self.zoo
                                       if s["mode"] == "normal"])
        for src in attacks["sources"]:
            if src != "ensemble" and src not in seen:
                raise ConfigError(f"attack source {src!r} not a zoo model id")
        attacks.setdefault("eval_count", 200)
        attacks.setdefault("workers", 1)
        overrides = dict(attacks.setdefault("overrides", {}))
        _reject_unknown(overrides, _OVERRIDE_KEYS, "attacks.overrides")
        self.attacks = attacks

        sweeps = doc.get("sweeps") or []
        self.sweeps = []
        for i, spec in enumerate(sweeps):
            spec = dict(spec)
            _reject_unknown(spec, _SWEEP_KEYS, f"sweeps[{i}]")
            if spec.get("parameter") not in DEFAULT_GRIDS:
                raise ConfigError(
                    f"sweeps[{i}]: parameter must be one of {sorted(DEFAULT_GRIDS)}"
                )
            if spec.get("preset") not in PRESETS:
                raise ConfigError(f"sweeps[{i}]: unknown preset")
            src = spec.get("source")
            if src not in seen:
                raise ConfigError(f"sweeps[{i}]: source must be a zoo model id")
            if "grid" in spec and not spec["grid"]:
                raise ConfigError(f"sweeps[{i}]: empty grid")
            self.sweeps.append(spec)

        self.raw = {
            "master_seed": self.master_seed,
            "out_dir": self.out_dir,
            "dataset": self.dataset,
            "zoo": self.zoo,
            "attacks": self.attacks,
            "sweeps": self.sweeps,
        }

    @property
    def config_sha(self):
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def run_dir(self):
        return os.path.join(self.out_dir, self.config_sha[:12])

    def normal_ids(self):
        return [s["id"] for s in self.zoo if s["mode"] == "normal"]

    def robust_ids(self):
        return [s["id"] for s in self.zoo if s["mode"] == "adversarial"]


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return ExperimentConfig(doc)


def _file_sha(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dump_json(doc, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _ensure_run_dir(cfg):
    run = cfg.run_dir
    os.makedirs(run, exist_ok=True)
    echo = os.path.join(run, "config.json")
    if not os.path.exists(echo):
        _dump_json({"config": cfg.raw, "config_sha": cfg.config_sha}, echo)
    return run


def _dataset_path(cfg, run_dir):
    if "path" in cfg.dataset:
        path = cfg.dataset["path"]
        if not os.path.exists(path):
            raise ConfigError(f"dataset path does not exist: {path}")
        return path
    path = os.path.join(run_dir, "dataset.dakd")
    if not os.path.exists(path):
        gen = GENERATORS[cfg.dataset["kind"]]
        ds = gen(cfg.dataset["n"], h=cfg.dataset["hw"],
                 classes=cfg.dataset["classes"],
                 seed=sub_seed(cfg.master_seed, "dataset"))
        save_dataset(ds, path)
    return path


# -- pipeline stages ------------------------------------------------------------


def cmd_dataset_gen(kind, n, hw, classes, seed, out):
    if kind not in GENERATORS:
        raise ConfigError(f"unknown dataset kind {kind!r}, have {sorted(GENERATORS)}")
    ds = GENERATORS[kind](n, h=hw, classes=classes, seed=seed)
    save_dataset(ds, out)
    return out


def cmd_dataset_import(path):
    """Validate a DAKD file; returns its summary."""
    ds = load_dataset(path)
    return {
        "path": path, "m": len(ds), "shape": list(ds.image_shape),
        "classes": int(ds.n_classes), "sha256": _file_sha(path),
    }


def _train_one(cfg, spec, dataset):
    tc = TrainConfig(lr=spec["lr"], epochs=spec["epochs"],
                     batch_size=spec["batch_size"],
                     seed=sub_seed(cfg.master_seed, f"train:{spec['id']}"))
    mode = (TrainMode("adversarial", eps=spec["eps"], steps=spec["steps"])
            if spec["mode"] == "adversarial" else TrainMode())
    return train(build_arch(spec["arch"], dataset.image_shape[1],
                            dataset.n_classes), dataset, tc, mode)


def cmd_train(cfg):
    """Train the zoo (resuming past valid model files) and write the manifest.

    The manifest records clean accuracy for every model and PGD accuracy
    (at the largest robust training radius) for all models when the zoo has
    any adversarially trained member -- the robust-vs-normal gap is the
    point of recording it.
    """
    run_dir = _ensure_run_dir(cfg)
    ds_path = _dataset_path(cfg, run_dir)
    dataset = load_dataset(ds_path)
    models_dir = os.path.join(run_dir, "models")
    os.makedirs(models_dir, exist_ok=True)

    models, entries = {}, {}
    for spec in cfg.zoo:
        path = os.path.join(models_dir, f"{spec['id']}.dakm")
        model = None
        if os.path.exists(path):
            try:
                model = load_model(path)
            except DataFormatError:
                model = None  # invalid file: retrain below
        if model is None:
            model = _train_one(cfg, spec, dataset)
            save_model(model, path)
        models[spec["id"]] = model
        entries[spec["id"]] = {
            "arch": spec["arch"], "mode": spec["mode"],
            "clean_acc": accuracy(model, dataset.images, dataset.labels),
            "file": os.path.relpath(path, run_dir), "sha256": _file_sha(path),
        }

    robust_eps = [s["eps"] for s in cfg.zoo if s["mode"] == "adversarial"]
    manifest = {
        "schema": REPORT_SCHEMA,
        "config_sha": cfg.config_sha,
        "dataset_sha": _file_sha(ds_path),
        "models": entries,
    }
    if robust_eps:
        eps = max(robust_eps)
        pgd_cfg = attack_config(
            "pgd", epsilon=eps, seed=sub_seed(cfg.master_seed, "eval:pgd"))
        manifest["pgd_eval_epsilon"] = eps
        for mid, model in models.items():
            adv = run_attack(model, dataset.images, dataset.labels, pgd_cfg,
                             workers=cfg.attacks["workers"])
            entries[mid]["pgd_acc"] = accuracy(model, adv.x_star, dataset.labels)
    _dump_json(manifest, os.path.join(run_dir, "manifest.json"))
    return manifest


def _load_zoo(cfg, run_dir):
    models = {}
    for spec in cfg.zoo:
        path = os.path.join(run_dir, "models", f"{spec['id']}.dakm")
        if not os.path.exists(path):
            raise ConfigError(
                f"model file missing for {spec['id']!r}; run `train` first"
            )
        models[spec["id"]] = load_model(path)
    return models


def _eval_set(cfg, dataset, models):
    """Examples every zoo model classifies correctly, capped at eval_count."""
    ok = np.ones(len(dataset), dtype=bool)
    for model in models.values():
        ok &= model.predict(dataset.images) == dataset.labels
    idx = np.nonzero(ok)[0][: cfg.attacks["eval_count"]]
    if len(idx) == 0:
        raise ConfigError("no example is correctly classified by every model")
    return idx, int(ok.sum())


def _build_attack_config(cfg, preset, hw, seed, extra=None):
    ov = dict(cfg.attacks["overrides"])
    if extra:
        _reject_unknown(extra, _OVERRIDE_KEYS | {"seed"}, "attack overrides")
        ov.update(extra)
    seed = ov.pop("seed", seed)
    dim_prob = ov.pop("dim_prob", None)
    dim_ms = ov.pop("dim_min_scale", None)
    if dim_ms is not None and dim_prob is None:
        raise ConfigError("dim_min_scale needs dim_prob")
    if dim_prob is not None:
        ov["dim"] = DimSpec(p=dim_prob, min_scale=0.85 if dim_ms is None else dim_ms)
    return attack_config(preset, hw=hw, seed=seed, **ov)


def _attack_pairs(cfg, preset, source):
    if (preset is None) != (source is None):
        raise ConfigError("give both --attack and --source, or neither")
    if preset is not None:
        return [(preset, source)]
    pairs = [(p, s) for p in cfg.attacks["presets"]
             for s in cfg.attacks["sources"]]
    if not pairs:
        raise ConfigError("config lists no attack presets")
    return pairs


def cmd_attack(cfg, preset=None, source=None, overrides=None, workers=None):
    """Craft D* for (preset, source) pairs and append per-target rows.

    source may be a zoo model id or "ensemble" (all normal models fused with
    equal weights; every member is then flagged white-box in the rows).
    """
    run_dir = _ensure_run_dir(cfg)
    ds_path = _dataset_path(cfg, run_dir)
    dataset = load_dataset(ds_path)
    dataset_sha = _file_sha(ds_path)
    models = _load_zoo(cfg, run_dir)
    normal_ids = cfg.normal_ids()
    workers = cfg.attacks["workers"] if workers is None else workers

    idx, kept = _eval_set(cfg, dataset, models)
    x, y = dataset.images[idx], dataset.labels[idx]
    hw = dataset.image_shape[1]

    atk_dir = os.path.join(run_dir, "attacks")
    rows_dir = os.path.join(run_dir, "rows")
    os.makedirs(atk_dir, exist_ok=True)
    os.makedirs(rows_dir, exist_ok=True)

    written = []
    for p, s in _attack_pairs(cfg, preset, source):
        if p not in PRESETS:
            raise ConfigError(f"unknown attack preset {p!r}")
        if s == "ensemble":
            if not normal_ids:
                raise ConfigError("ensemble source needs normal zoo models")
            crafting = Ensemble([models[i] for i in normal_ids])
            white = set(normal_ids)
        elif s in models:
            crafting = models[s]
            white = {s}
        else:
            raise ConfigError(f"source {s!r} not in the zoo")
        acfg = _build_attack_config(
            cfg, p, hw, sub_seed(cfg.master_seed, f"attack:{p}:{s}"), overrides)
        result = run_attack(crafting, x, y, acfg, example_ids=idx,
                            workers=workers, source_id=s)
        stem = f"{p}__{s}"
        daka = os.path.join(atk_dir, f"{stem}.daka")
        save_attack_result(result, daka, extra_meta={
            "config_sha": cfg.config_sha, "dataset_sha": dataset_sha,
            "filter_kept": kept,
        })
        adv = AdversarialSet.from_result(result)
        rows = []
        for tid in models:
            rows.append({
                "attack": p, "source": s, "target": tid,
                "success_rate": success_rate(models[tid], adv),
                "M": len(adv), "seed": acfg.seed,
                "white_box": tid in white,
            })
        meta = {"schema": REPORT_SCHEMA, "dataset_sha": dataset_sha,
                "config_sha": cfg.config_sha, "seed": acfg.seed,
                "filter_kept": kept}
        report = TransferReport(rows=rows, meta=dict(meta))
        with open(os.path.join(rows_dir, f"{stem}.csv"), "w") as fh:
            fh.write(report.to_csv())
        _dump_json({"meta": meta, "rows": rows},
                   os.path.join(rows_dir, f"{stem}.json"))
        written.append(daka)
    return written


def cmd_sweep(cfg, workers=None):
    """Run every sweep in the config; one JSON artifact per sweep."""
    run_dir = _ensure_run_dir(cfg)
    ds_path = _dataset_path(cfg, run_dir)
    dataset = load_dataset(ds_path)
    models = _load_zoo(cfg, run_dir)
    workers = cfg.attacks["workers"] if workers is None else workers
    idx, kept = _eval_set(cfg, dataset, models)
    x, y = dataset.images[idx], dataset.labels[idx]
    hw = dataset.image_shape[1]

    sweep_dir = os.path.join(run_dir, "sweeps")
    os.makedirs(sweep_dir, exist_ok=True)
    written = []
    for spec in cfg.sweeps:
        param, p, s = spec["parameter"], spec["preset"], spec["source"]
        grid = spec.get("grid", DEFAULT_GRIDS[param])
        base = _build_attack_config(
            cfg, p, hw, sub_seed(cfg.master_seed, f"sweep:{param}:{p}:{s}"))
        curves = sweep(param, grid, base, models, x, y, sources=[s],
                       example_ids=idx, workers=workers)
        doc = {
            "schema": REPORT_SCHEMA, "config_sha": cfg.config_sha,
            "dataset_sha": _file_sha(ds_path), "preset": p,
            "filter_kept": kept, **curves,
        }
        path = os.path.join(sweep_dir, f"{param}__{p}__{s}.json")
        _dump_json(doc, path)
        written.append(path)
    return written


def cmd_report(cfg):
    """Bundle all run artifacts into report.csv (merge law) + report.json."""
    run_dir = _ensure_run_dir(cfg)
    meta = {"schema": REPORT_SCHEMA, "config_sha": cfg.config_sha,
            "master_seed": cfg.master_seed}
    ds_file = os.path.join(run_dir, "dataset.dakd")
    if "path" in cfg.dataset:
        ds_file = cfg.dataset["path"]
    if os.path.exists(ds_file):
        meta["dataset_sha"] = _file_sha(ds_file)

    rows_dir = os.path.join(run_dir, "rows")
    csv_texts, rows = [], []
    if os.path.isdir(rows_dir):
        for name in sorted(os.listdir(rows_dir)):
            path = os.path.join(rows_dir, name)
            if name.endswith(".csv"):
                with open(path) as fh:
                    csv_texts.append(fh.read())
            elif name.endswith(".json"):
                with open(path) as fh:
                    rows.extend(json.load(fh)["rows"])
    merged_csv = (merge_csv(csv_texts) if csv_texts
                  else TransferReport(rows=[], meta=dict(meta)).to_csv())

    sweeps = []
    sweep_dir = os.path.join(run_dir, "sweeps")
    if os.path.isdir(sweep_dir):
        for name in sorted(os.listdir(sweep_dir)):
            with open(os.path.join(sweep_dir, name)) as fh:
                sweeps.append(json.load(fh))

    similarity = {}
    atk_dir = os.path.join(run_dir, "attacks")
    if os.path.isdir(atk_dir):
        by_preset = {}
        for name in sorted(os.listdir(atk_dir)):
            if not name.endswith(".daka"):
                continue
            stem = name[: -len(".daka")]
            p, _, s = stem.partition("__")
            if s == "ensemble":
                continue
            by_preset.setdefault(p, []).append(
                (s, os.path.join(atk_dir, name)))
        for p, items in sorted(by_preset.items()):
            if len(items) < 2:
                continue
            sets = {}
            for s, path in items:
                sets[s] = AdversarialSet.from_result(load_attack_result(path))
            similarity[p] = perturbation_cosine(sets).to_json_dict()

    rows.sort(key=lambda r: (r["attack"], r["source"], r["target"]))
    report = TransferReport(rows=rows, meta=meta, sweeps=sweeps,
                            similarity=similarity)
    csv_path = os.path.join(run_dir, "report.csv")
    json_path = os.path.join(run_dir, "report.json")
    with open(csv_path, "w") as fh:
        fh.write(merged_csv)
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
    return {"csv": csv_path, "json": json_path, "rows": len(rows)}
