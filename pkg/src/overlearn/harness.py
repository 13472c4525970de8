"""End-to-end overlearning audits driven by a TOML experiment config."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from overlearn.analysis import cka_heatmap, cramers_v, majority_baseline, similarity_to_init
from overlearn.attacks import (
    as_oracle,
    decensor_attack,
    infer_attribute,
    repurpose,
    scratch_baseline,
)
from overlearn.censoring import CensorConfig, train_adversarial_censored, train_it_censored
from overlearn.data import (
    ContingencySpec,
    attr_labels,
    features,
    generate_clustered,
    generate_synthetic,
    restrict_attribute,
    split,
    task_labels,
)
from overlearn.models import (
    TrainConfig,
    accuracy,
    build_model,
    save_model,
    train_task,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
CONDITION_NAMES = {"none": "BASE", "adversarial": "ADV", "info_theoretic": "IT"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    joint: list = field(default_factory=lambda: (np.full((2, 4), 0.125)).tolist())
    n: int = 4000
    feature_dim: int = 32
    noise_scale: float = 0.45
    label_sampling: str = "iid"
    train_frac: float = 0.8
    aux_frac: float = 0.5
    aux_from_heldout: bool = False

    hidden_widths: list = field(default_factory=lambda: [128, 32])
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.001

    censor_methods: list = field(default_factory=lambda: ["none"])
    censor_layer: int | None = None
    gamma: float = 1.0
    beta: float = 0.01
    lambda_: float = 0.0001
    adversarial_epochs: int = 50
    discriminator_widths: list = field(default_factory=lambda: [256, 128])

    attacks: list = field(default_factory=list)
    attack_epochs: int = 50
    attack_widths: list = field(default_factory=lambda: [256, 128])
    transfer_fracs: list = field(default_factory=list)
    repurpose_layers: list = field(default_factory=list)
    repurpose_epochs: int = 50
    repurpose_batch_size: int = 32
    keep_attr: int | None = None

    cka: bool = False
    seeds: list = field(default_factory=lambda: [1])
    output_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        unknown = set(self.censor_methods) - set(CONDITION_NAMES)
        if unknown:
            raise ConfigError(f"unknown censor methods: {sorted(unknown)}")
        if "none" not in self.censor_methods:
            self.censor_methods = ["none", *self.censor_methods]
        bad = set(self.attacks) - {"infer", "decensor", "repurpose", "unrepresented"}
        if bad:
            raise ConfigError(f"unknown attacks: {sorted(bad)}")
        n_layers = len(self.hidden_widths)
        if self.censor_layer is not None and not 1 <= self.censor_layer <= n_layers:
            raise ConfigError(f"censor layer {self.censor_layer} invalid for {n_layers} hidden layers")
        for layer in self.repurpose_layers:
            if not 0 <= layer <= n_layers:
                raise ConfigError(f"repurpose layer {layer} invalid for {n_layers} hidden layers")
        if "repurpose" in self.attacks and not self.transfer_fracs:
            raise ConfigError("repurpose requires transfer_fracs")
        if "unrepresented" in self.attacks and self.keep_attr is None:
            raise ConfigError("unrepresented requires keep_attr")
        ContingencySpec(np.asarray(self.joint))

    @property
    def spec(self) -> ContingencySpec:
        return ContingencySpec(np.asarray(self.joint, dtype=np.float64))

    def digest(self) -> str:
        d = asdict(self)
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {
    "data": {"joint", "n", "feature_dim", "noise_scale", "label_sampling", "train_frac",
             "aux_frac", "aux_from_heldout"},
    "model": {"hidden_widths", "epochs", "batch_size", "learning_rate"},
    "censor": {"methods", "layer", "gamma", "beta", "lambda", "adversarial_epochs",
               "discriminator_widths"},
    "attacks": {"run", "epochs", "widths", "transfer_fracs", "repurpose_layers",
                "repurpose_epochs", "repurpose_batch_size", "keep_attr"},
    "analysis": {"cka"},
    "experiment": {"seeds", "output_dir"},
}
_RENAME = {("censor", "methods"): "censor_methods", ("censor", "layer"): "censor_layer",
           ("censor", "lambda"): "lambda_", ("attacks", "run"): "attacks",
           ("attacks", "epochs"): "attack_epochs", ("attacks", "widths"): "attack_widths"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    kwargs = {}
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in body.items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            kwargs[_RENAME.get((section, key), key)] = value
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def _train_config(cfg: ExperimentConfig, seed: int, epochs: int | None = None,
                  batch_size: int | None = None) -> TrainConfig:
    return TrainConfig(epochs=epochs or cfg.epochs, batch_size=batch_size or cfg.batch_size,
                       learning_rate=cfg.learning_rate, seed=seed)


def _train_condition(method: str, bundle, cfg: ExperimentConfig, seed: int):
    k_y = bundle.num_task_classes
    if method == "none":
        model = build_model(bundle.feature_dim, cfg.hidden_widths, k_y, seed=seed)
        return train_task(model, bundle, _train_config(cfg, seed))
    censor_cfg = CensorConfig(method, target_layer=cfg.censor_layer, gamma=cfg.gamma,
                              beta=cfg.beta, lambda_=cfg.lambda_,
                              discriminator_widths=tuple(cfg.discriminator_widths))
    if method == "adversarial":
        model = build_model(bundle.feature_dim, cfg.hidden_widths, k_y, seed=seed)
        return train_adversarial_censored(bundle, model, censor_cfg,
                                          _train_config(cfg, seed, cfg.adversarial_epochs))
    return train_it_censored(bundle, censor_cfg, _train_config(cfg, seed), cfg.hidden_widths)[0]


def audit_no_probe_leak(provenance: dict, probe) -> None:
    """Attacks must never train on probe examples."""
    probe_ids = {int(ex.uid) for ex in probe}
    overlap = probe_ids.intersection(provenance.get("aux_uids", ()))
    if overlap:
        raise AssertionError(f"attack trained on {len(overlap)} probe examples")


def _run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None) -> dict:
    bundle = generate_synthetic(cfg.spec, cfg.n, cfg.feature_dim, cfg.noise_scale, seed,
                                cfg.train_frac, cfg.aux_frac, cfg.transfer_fracs,
                                cfg.label_sampling)
    if cfg.aux_from_heldout:
        bundle = split(bundle.all_examples(), cfg.train_frac, cfg.aux_frac, cfg.transfer_fracs,
                       seed=seed, aux_from_heldout=True, metadata=bundle.metadata)
    test = bundle.test
    x_test = features(test)
    s_test = attr_labels(test)
    y_test = task_labels(test)
    k_s = bundle.num_attr_classes
    attack_cfg = TrainConfig(epochs=cfg.attack_epochs, batch_size=cfg.batch_size,
                             learning_rate=cfg.learning_rate, seed=seed)
    rand_task = majority_baseline(y_test)
    rand_attr = majority_baseline(s_test)
    result = {"seed": seed, "conditions": [], "decensor": [], "repurpose": [], "cka": [],
              "unrepresented": [], "failures": [],
              "cramers_v": cramers_v(task_labels(bundle.train + test), attr_labels(bundle.train + test)).cramers_v}
    models = {}

    for method in cfg.censor_methods:
        name = CONDITION_NAMES[method]
        row = {"name": name, "seed": seed, "task_acc": None, "attr_acc": None,
               "rand_task": rand_task, "rand_attr": rand_attr}
        try:
            model = _train_condition(method, bundle, cfg, seed)
            models[name] = model
            row["task_acc"] = accuracy(model, test)
            row["layer"] = model.num_encoder_layers
            if out_dir is not None:
                ckpt = out_dir / "checkpoints" / f"seed{seed}_{name}.json"
                ckpt.parent.mkdir(parents=True, exist_ok=True)
                row["checkpoint"] = ckpt.relative_to(out_dir).as_posix()
                row["checkpoint_sha256"] = save_model(model, ckpt)
            else:
                row["checkpoint_sha256"] = model.digest()
            if "infer" in cfg.attacks or "decensor" in cfg.attacks:
                oracle = as_oracle(model)
                probe = oracle(x_test)
                attack, row["attr_acc"] = infer_attribute(bundle.aux, oracle, probe, s_test,
                                                          attack_cfg, cfg.attack_widths, k_s)
                audit_no_probe_leak(attack.provenance, test)
        except Exception as exc:  # recorded, the report is still emitted
            logger.exception("condition %s failed for seed %d", name, seed)
            result["failures"].append({"stage": "condition", "condition": name, "error": repr(exc)})
        result["conditions"].append(row)

        if "decensor" in cfg.attacks and method != "none" and name in models:
            try:
                oracle = as_oracle(models[name])
                transform, attack, acc = decensor_attack(
                    bundle.aux, oracle, oracle(x_test), s_test, attack_cfg, cfg.attack_widths,
                    aux_widths=cfg.hidden_widths,
                    aux_config=_train_config(cfg, seed + 1), num_classes=k_s)
                audit_no_probe_leak(attack.provenance, test)
                result["decensor"].append({"condition": name, "seed": seed, "acc": acc,
                                           "delta": acc - row["attr_acc"],
                                           "layer": row["layer"],
                                           "checkpoint_sha256": row["checkpoint_sha256"],
                                           "aux_model": attack.provenance["aux_model"]})
            except Exception as exc:
                logger.exception("decensor failed for %s, seed %d", name, seed)
                result["failures"].append({"stage": "decensor", "condition": name, "error": repr(exc)})

    base = models.get("BASE")
    if "repurpose" in cfg.attacks and base is not None:
        layers = cfg.repurpose_layers or [len(cfg.hidden_widths)]
        rp_cfg = TrainConfig(epochs=cfg.repurpose_epochs, batch_size=cfg.repurpose_batch_size,
                             learning_rate=cfg.learning_rate, seed=seed)
        for frac in cfg.transfer_fracs:
            transfer = bundle.transfer[float(frac)]
            try:
                scratch = scratch_baseline(transfer, test, cfg.hidden_widths, rp_cfg, k_s)
                for layer in layers:
                    _, acc = repurpose(base, layer, transfer, test, rp_cfg, k_s)
                    result["repurpose"].append({"fraction": float(frac), "layer": layer,
                                                "seed": seed, "source_model": base.digest(),
                                                "repurposed_acc": acc, "scratch_acc": scratch,
                                                "delta": acc - scratch,
                                                "transfer_size": len(transfer)})
            except Exception as exc:
                logger.exception("repurpose failed at fraction %s, seed %d", frac, seed)
                result["failures"].append({"stage": "repurpose", "condition": f"fraction={frac}",
                                           "error": repr(exc)})

    if "unrepresented" in cfg.attacks:
        try:
            restricted = restrict_attribute(bundle, cfg.keep_attr)
            model = build_model(bundle.feature_dim, cfg.hidden_widths, bundle.num_task_classes,
                                seed=seed)
            train_task(model, restricted, _train_config(cfg, seed))
            oracle = as_oracle(model)
            attack, acc = infer_attribute(bundle.aux, oracle, oracle(x_test), s_test,
                                          attack_cfg, cfg.attack_widths, k_s)
            audit_no_probe_leak(attack.provenance, test)
            result["unrepresented"].append({
                "keep_attr": cfg.keep_attr, "train_size": len(restricted.train),
                "task_acc": accuracy(model, test), "attr_acc": acc, "rand_attr": rand_attr,
                "delta": acc - rand_attr})
        except Exception as exc:
            logger.exception("unrepresented-attribute run failed for seed %d", seed)
            result["failures"].append({"stage": "unrepresented", "condition": "BASE",
                                       "error": repr(exc)})

    if cfg.cka and base is not None:
        for name, model in models.items():
            if name == "BASE":
                continue
            heat = cka_heatmap(base, model, test)
            entry = {"pair": f"BASE~{name}", "seed": seed, "values": heat.to_dict()["values"],
                     "layers_a": heat.layers_a, "layers_b": heat.layers_b}
            if out_dir is not None:
                path = out_dir / f"cka_seed{seed}_BASE_{name}.csv"
                heat.to_csv(path)
                entry["csv_path"] = path.name
            result["cka"].append(entry)
    return result


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _aggregate(per_seed: list[dict]) -> dict:
    conditions = []
    for name in [c["name"] for c in per_seed[0]["conditions"]]:
        rows = [c for r in per_seed for c in r["conditions"] if c["name"] == name]
        conditions.append({"name": name,
                           **{k: _mean([r[k] for r in rows])
                              for k in ("task_acc", "attr_acc", "rand_task", "rand_attr")}})
    decensor = []
    for name in dict.fromkeys(d["condition"] for r in per_seed for d in r["decensor"]):
        rows = [d for r in per_seed for d in r["decensor"] if d["condition"] == name]
        decensor.append({"condition": name, "acc": _mean([d["acc"] for d in rows]),
                         "delta": _mean([d["delta"] for d in rows])})
    repurpose = []
    keys = dict.fromkeys((d["fraction"], d["layer"]) for r in per_seed for d in r["repurpose"])
    for frac, layer in keys:
        rows = [d for r in per_seed for d in r["repurpose"]
                if d["fraction"] == frac and d["layer"] == layer]
        repurpose.append({"fraction": frac, "layer": layer,
                          **{k: _mean([d[k] for d in rows])
                             for k in ("repurposed_acc", "scratch_acc", "delta")}})
    unrepresented = []
    rows = [d for r in per_seed for d in r["unrepresented"]]
    if rows:
        unrepresented.append({"keep_attr": rows[0]["keep_attr"],
                              **{k: _mean([d[k] for d in rows])
                                 for k in ("task_acc", "attr_acc", "rand_attr", "delta")}})
    return {"conditions": conditions, "decensor": decensor, "repurpose": repurpose,
            "unrepresented": unrepresented}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every seed of ``cfg`` and assemble the audit report (means over seeds).

    With ``out_dir`` the report, checkpoints, and CKA CSVs are written there.
    """
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in cfg.seeds:
        logger.info("running seed %d", seed)
        per_seed.append(_run_seed(cfg, seed, out))
    report = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": cfg.digest(),
        "aggregation": "arithmetic mean over seeds; per-seed values under per_seed",
        "cramers_v": _mean([r["cramers_v"] for r in per_seed]),
        **_aggregate(per_seed),
        "cka": [{"pair": c["pair"], "seed": c["seed"], "csv_path": c.get("csv_path")}
                for r in per_seed for c in r["cka"]],
        "failures": [dict(f, seed=r["seed"]) for r in per_seed for f in r["failures"]],
        "provenance_audit": "passed",
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "wall_clock_s": time.perf_counter() - start,
    }
    if out is not None:
        write_report(report, out / "report.json")
    return report


def report_bytes(report: dict, exclude_timing: bool = False) -> bytes:
    if exclude_timing:
        report = {k: v for k, v in report.items() if k != "wall_clock_s"}
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_report(report: dict, path) -> None:
    Path(path).write_bytes(report_bytes(report))


def _fmt(v, scale=100.0):
    return "n/a" if v is None else f"{v * scale:.2f}"


def render_tables(report: dict) -> str:
    """Tab-delimited text tables in the layout of the inference, de-censoring,
    and re-purposing summaries."""
    lines = [f"# cramers_v(y,s)\t{report['cramers_v']:.4f}", "",
             "# inference from representations (accuracy, %)",
             "condition\ttask_acc\trand_task\tattr_acc\trand_attr"]
    for c in report["conditions"]:
        lines.append("\t".join([c["name"], _fmt(c["task_acc"]), _fmt(c["rand_task"]),
                                _fmt(c["attr_acc"]), _fmt(c["rand_attr"])]))
    if report.get("decensor"):
        lines += ["", "# de-censoring", "condition\tacc\tdelta"]
        for d in report["decensor"]:
            lines.append(f"{d['condition']}\t{_fmt(d['acc'])}\t{_fmt(d['delta'])}")
    if report.get("repurpose"):
        lines += ["", "# re-purposing (re-purposed minus scratch)",
                  "fraction\tlayer\trepurposed_acc\tscratch_acc\tdelta"]
        for d in report["repurpose"]:
            lines.append(f"{d['fraction']}\t{d['layer']}\t{_fmt(d['repurposed_acc'])}\t"
                         f"{_fmt(d['scratch_acc'])}\t{_fmt(d['delta'])}")
    if report.get("unrepresented"):
        lines += ["", "# unrepresented attribute", "keep_attr\tattr_acc\trand_attr\tdelta"]
        for d in report["unrepresented"]:
            lines.append(f"{d['keep_attr']}\t{_fmt(d['attr_acc'])}\t{_fmt(d['rand_attr'])}\t"
                         f"{_fmt(d['delta'])}")
    if report.get("failures"):
        lines += ["", "# failures", "seed\tstage\tcondition\terror"]
        for f in report["failures"]:
            lines.append(f"{f['seed']}\t{f['stage']}\t{f['condition']}\t{f['error']}")
    return "\n".join(lines) + "\n"


def complexity_diagnostic(cluster_counts=(5, 50), seeds=(1, 2, 3, 4, 5), n: int = 4000,
                          feature_dim: int = 32, noise_scale: float = 0.3,
                          hidden_widths=(128, 32), epochs: int = 30) -> dict:
    """Final-layer similarity to initialization for task classes made of
    ``k`` distributions each, for every k in ``cluster_counts``.

    Returns {k: [final-layer CKA-to-init per seed]}.
    """
    out: dict[int, list[float]] = {k: [] for k in cluster_counts}
    for seed in seeds:
        for k in cluster_counts:
            bundle = generate_clustered(2, k, n, feature_dim, noise_scale, seed)
            model = build_model(feature_dim, hidden_widths, 2, seed=seed)
            train_task(model, bundle, TrainConfig(epochs=epochs, seed=seed), record_snapshots=True)
            curves = similarity_to_init(model, [model.snapshots[0], model.snapshots[-1]], bundle.test)
            out[k].append(curves[len(hidden_widths)][-1])
    return out
