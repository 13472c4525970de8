"""Command-line entry point: ``overlearn <subcommand> ...``.

Errors are printed to stderr as a single ``error: <Kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from overlearn import __version__


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def write_reps_csv(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"r{i}" for i in range(values.shape[1])])
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_reps_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty representation file")
    header = rows[0]
    if header != [f"r{i}" for i in range(len(header))]:
        raise ValueError(f"{path}: header must be r0..r{{d-1}}")
    try:
        return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_labels_csv(path, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s"])
        for v in labels:
            w.writerow([int(v)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "s" not in rows[0]:
        raise ValueError(f"{path}: missing column 's'")
    return np.array([int(r["s"]) for r in rows], dtype=np.int64)


def _emit(result: dict, out) -> None:
    text = json.dumps(result, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _train_config(args, epochs=None, batch_size=None):
    from overlearn.models import TrainConfig

    return TrainConfig(epochs=args.epochs or epochs or 30,
                       batch_size=args.batch_size or batch_size or 128,
                       learning_rate=args.lr, seed=args.seed)


# -- subcommands ----------------------------------------------------------------

def cmd_generate_data(args) -> int:
    from overlearn.data import ContingencySpec, generate_synthetic, write_tabular

    if args.joint:
        joint = np.array(json.loads(args.joint), dtype=np.float64)
        spec = ContingencySpec(joint)
    else:
        spec = ContingencySpec.independent(np.full(args.task_classes, 1 / args.task_classes),
                                           np.full(args.attr_classes, 1 / args.attr_classes))
    bundle = generate_synthetic(spec, args.n, args.feature_dim, args.noise, args.seed,
                                args.train_frac, args.aux_frac, _floats(args.transfer_fracs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tabular(out / "train.csv", bundle.train)
    write_tabular(out / "test.csv", bundle.test)
    write_tabular(out / "aux.csv", bundle.aux)
    for frac, examples in bundle.transfer.items():
        write_tabular(out / f"transfer_{frac:g}.csv", examples)
    (out / "metadata.json").write_text(json.dumps(bundle.metadata, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(json.dumps({"out": str(out), "train": len(bundle.train), "test": len(bundle.test),
                      "aux": len(bundle.aux)}, sort_keys=True))
    return 0


def _num_classes(examples, attr: bool) -> int:
    from overlearn.data import attr_labels, task_labels

    labels = attr_labels(examples) if attr else task_labels(examples)
    return int(labels.max()) + 1


def cmd_train(args) -> int:
    from overlearn.data import read_examples
    from overlearn.models import build_model, save_model, train_task

    examples = read_examples(args.data)
    attr = args.labels == "attr"
    k = args.num_classes or _num_classes(examples, attr)
    model = build_model(examples[0].features.shape[0], _ints(args.hidden), k, seed=args.seed)
    train_task(model, examples, _train_config(args), labels=args.labels)
    digest = save_model(model, args.out)
    print(json.dumps({"checkpoint": args.out, "sha256": digest,
                      "train_loss": model.training_log[-1]["loss"]}, sort_keys=True))
    return 0


def cmd_censor(args) -> int:
    from overlearn.censoring import CensorConfig, train_adversarial_censored, train_it_censored
    from overlearn.data import DatasetBundle, read_examples
    from overlearn.models import build_model, save_model

    examples = read_examples(args.data)
    d = examples[0].features.shape[0]
    k_y = args.num_classes or _num_classes(examples, False)
    meta = {"feature_dim": d, "num_task_classes": k_y,
            "num_attr_classes": args.attr_classes or _num_classes(examples, True)}
    bundle = DatasetBundle(examples, [], metadata=meta)
    hidden = _ints(args.hidden)
    cfg = CensorConfig(args.method, target_layer=args.layer, gamma=args.gamma, beta=args.beta,
                       lambda_=args.lambda_)
    if args.method == "adversarial":
        model = build_model(d, hidden, k_y, seed=args.seed)
        train_adversarial_censored(bundle, model, cfg, _train_config(args, epochs=50))
    else:
        model = train_it_censored(bundle, cfg, _train_config(args), hidden)[0]
    model.metadata["censor"] = cfg.to_dict()
    digest = save_model(model, args.out)
    print(json.dumps({"checkpoint": args.out, "sha256": digest}, sort_keys=True))
    return 0


def _probe_and_aux(args):
    """Resolve (aux examples, oracle, probe reps, probe labels) from CLI inputs."""
    from overlearn.attacks import as_oracle
    from overlearn.data import attr_labels, features, read_examples
    from overlearn.models import load_model

    aux = read_examples(args.aux)
    if args.model:
        oracle = as_oracle(load_model(args.model), args.layer)
    elif args.aux_reps:
        table = read_reps_csv(args.aux_reps)
        if len(table) != len(aux):
            raise ValueError(f"{args.aux_reps} has {len(table)} rows, aux has {len(aux)}")

        def oracle(x):
            # precomputed rows stand in for the model, so only the aux set can be mapped
            if len(x) != len(table):
                raise ValueError("precomputed aux representations only cover the aux set")
            return table
    else:
        raise ValueError("give --model (oracle) or --aux-reps (precomputed aux representations)")
    if args.reps:
        probe = read_reps_csv(args.reps)
        labels = read_labels_csv(args.labels) if args.labels else None
    else:
        if not args.probe:
            raise ValueError("give --reps/--labels or --probe")
        probe_ex = read_examples(args.probe)
        probe = oracle(features(probe_ex))
        labels = attr_labels(probe_ex)
    if labels is None:
        raise ValueError("--labels is required with --reps")
    if len(labels) != len(probe):
        raise ValueError(f"probe has {len(probe)} rows but {len(labels)} labels")
    return aux, oracle, probe, labels


def cmd_attack(args) -> int:
    from overlearn.analysis import majority_baseline
    from overlearn.attacks import infer_attribute

    aux, oracle, probe, labels = _probe_and_aux(args)
    attack, acc = infer_attribute(aux, oracle, probe, labels, _train_config(args, epochs=50),
                                  tuple(_ints(args.widths)), args.attr_classes)
    _emit({"accuracy": acc, "majority_baseline": majority_baseline(labels),
           "layer": attack.provenance["layer"], "source_model": attack.provenance["source_model"]},
          args.out)
    return 0


def cmd_decensor(args) -> int:
    from overlearn.attacks import decensor_attack
    from overlearn.analysis import majority_baseline

    aux, oracle, probe, labels = _probe_and_aux(args)
    _, attack, acc = decensor_attack(aux, oracle, probe, labels, _train_config(args, epochs=50),
                                     tuple(_ints(args.widths)), aux_widths=tuple(_ints(args.aux_hidden)),
                                     num_classes=args.attr_classes)
    _emit({"accuracy": acc, "majority_baseline": majority_baseline(labels),
           "aux_model": attack.provenance["aux_model"],
           "update_order": attack.provenance["update_order"]}, args.out)
    return 0


def cmd_repurpose(args) -> int:
    from overlearn.attacks import repurpose, scratch_baseline
    from overlearn.data import read_examples
    from overlearn.models import load_model, save_model

    model = load_model(args.model)
    transfer = read_examples(args.transfer)
    test = read_examples(args.test)
    layer = model.encoder.num_layers if args.layer is None else args.layer
    cfg = _train_config(args, epochs=50, batch_size=32)
    new, acc = repurpose(model, layer, transfer, test, cfg, args.attr_classes,
                         freeze_encoder=args.freeze)
    result = {"layer": layer, "repurposed_acc": acc, "source_model": model.digest()}
    if args.scratch:
        widths = model.encoder.sizes[1:]
        scratch = scratch_baseline(transfer, test, widths, cfg, args.attr_classes)
        result.update(scratch_acc=scratch, delta=acc - scratch)
    if args.save:
        result["checkpoint_sha256"] = save_model(new, args.save)
    _emit(result, args.out)
    return 0


def cmd_cka(args) -> int:
    from overlearn.analysis import cka_heatmap
    from overlearn.data import read_examples
    from overlearn.models import load_model

    heat = cka_heatmap(load_model(args.model_a), load_model(args.model_b), read_examples(args.data),
                       preactivation=args.preactivation)
    if args.out:
        heat.to_csv(args.out)
        print(json.dumps({"csv": args.out, "diagonal": heat.diagonal().tolist()}, sort_keys=True))
    else:
        heat_rows = ["layer_b," + ",".join(f"a{la}" for la in heat.layers_a)]
        for j, lb in enumerate(heat.layers_b):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in heat.values[:, j]]
            heat_rows.append(f"b{lb}," + ",".join(cells))
        print("\n".join(heat_rows))
    return 0


def cmd_represent(args) -> int:
    from overlearn.data import attr_labels, read_examples
    from overlearn.models import extract_representations, load_model

    model = load_model(args.model)
    examples = read_examples(args.data)
    layer = model.num_encoder_layers if args.layer is None else args.layer
    reps = extract_representations(model, layer, examples, args.preactivation)
    write_reps_csv(args.out, reps.values)
    if args.labels_out:
        write_labels_csv(args.labels_out, attr_labels(examples))
    print(json.dumps({"reps": args.out, "rows": int(reps.shape[0]), "dim": int(reps.shape[1]),
                      "layer": layer}, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from overlearn.harness import render_tables

    report = json.loads(Path(args.report).read_text(encoding="utf-8"))
    text = render_tables(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    from overlearn.harness import load_config, render_tables, run_experiment

    cfg = load_config(args.config)
    out = args.out or cfg.output_dir
    report = run_experiment(cfg, out)
    sys.stdout.write(render_tables(report))
    print(f"report: {Path(out) / 'report.json'}")
    return 1 if report["failures"] and args.strict else 0


# -- parser ---------------------------------------------------------------------

def _add_training(p, epochs_help="epochs"):
    p.add_argument("--epochs", type=int, default=None, help=epochs_help)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)


def _add_attack_inputs(p):
    p.add_argument("--aux", required=True, help="aux examples CSV (features, y, s)")
    p.add_argument("--model", help="checkpoint used as the representation oracle")
    p.add_argument("--layer", type=int, default=None, help="oracle layer (default: last)")
    p.add_argument("--aux-reps", help="precomputed aux representations CSV (instead of --model)")
    p.add_argument("--reps", help="probe representations CSV (r0..r{d-1})")
    p.add_argument("--labels", help="probe label CSV (column s)")
    p.add_argument("--probe", help="probe examples CSV, mapped through --model")
    p.add_argument("--widths", default="256,128")
    p.add_argument("--attr-classes", type=int, default=None)
    p.add_argument("--out", help="also write the JSON result here")
    _add_training(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate-data", help="write a synthetic train/test/aux/transfer split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.45)
    p.add_argument("--joint", help="joint P(y,s) as a JSON nested list")
    p.add_argument("--task-classes", type=int, default=2)
    p.add_argument("--attr-classes", type=int, default=4)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--aux-frac", type=float, default=0.5)
    p.add_argument("--transfer-fracs", default="")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train an uncensored model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--hidden", default="128,32")
    p.add_argument("--labels", choices=["task", "attr"], default="task")
    p.add_argument("--num-classes", type=int, default=None)
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("censor", help="train a censored model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["adversarial", "info_theoretic"], required=True)
    p.add_argument("--layer", type=int, default=None, help="censored layer (default: last)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.0001)
    p.add_argument("--hidden", default="128,32")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--attr-classes", type=int, default=None)
    _add_training(p)
    p.set_defaults(func=cmd_censor)

    p = sub.add_parser("attack", help="infer the sensitive attribute from representations")
    _add_attack_inputs(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("decensor", help="de-censoring attack through an auxiliary model")
    _add_attack_inputs(p)
    p.add_argument("--aux-hidden", default="128,32")
    p.set_defaults(func=cmd_decensor)

    p = sub.add_parser("repurpose", help="fine-tune a model's encoder to predict s")
    p.add_argument("--model", required=True)
    p.add_argument("--transfer", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--layer", type=int, default=None, help="deepest copied layer (default: all)")
    p.add_argument("--freeze", action="store_true")
    p.add_argument("--scratch", action="store_true", help="also train the from-scratch baseline")
    p.add_argument("--attr-classes", type=int, default=None)
    p.add_argument("--save", help="write the re-purposed checkpoint here")
    p.add_argument("--out")
    _add_training(p)
    p.set_defaults(func=cmd_repurpose)

    p = sub.add_parser("cka", help="layer-by-layer linear CKA between two models")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--preactivation", action="store_true")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("represent", help="export a layer's representations as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--preactivation", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.set_defaults(func=cmd_represent)

    p = sub.add_parser("report", help="render report.json as text tables")
    p.add_argument("report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run a full experiment from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config's output_dir)")
    p.add_argument("--strict", action="store_true", help="exit 1 if any stage failed")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
