"""Command-line entry point: ``octfew <subcommand> ...``.

Exit status is 0 on success, 1 for invalid arguments, configs or inputs and
2 when a stage fails while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _pairs(values, what: str) -> dict:
    out = {}
    for v in values or ():
        if "=" not in v:
            raise UsageError(f"{what} must look like KEY=VALUE, got {v!r}")
        k, val = v.split("=", 1)
        out[k] = val
    return out


def _json_arg(text: str | None) -> dict:
    if not text:
        return {}
    p = Path(text)
    try:
        return json.loads(p.read_text()) if p.is_file() else json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not valid JSON: {text!r} ({exc})") from exc


def _manifest(path):
    from .dataset import read_manifest

    if not Path(path).is_file():
        raise UsageError(f"manifest {path} does not exist")
    return read_manifest(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(a):
    from .dataset import scan_directory, write_manifest

    m = scan_directory(a.root, class_mapping=_pairs(a.map, "--map") or None, ignore=tuple(a.ignore or ()),
                       global_seed=a.seed)
    write_manifest(m, a.out)
    print(json.dumps({c.name: n for c, n in m.counts().items()}))


def cmd_synth(a):
    from .dataset import ClassLabel
    from .synthetic import DESK_COUNTS, make_corpus

    counts = dict(DESK_COUNTS)
    for k, v in _pairs(a.count, "--count").items():
        counts[ClassLabel.parse(k)] = int(v)
    make_corpus(a.root, counts, size=a.size, seed=a.seed)
    print(f"wrote {sum(counts.values())} images under {a.root}")


def cmd_augment(a):
    from .augment import AugmentationSpec, augment_to_count
    from .dataset import ClassLabel, Provenance, write_manifest

    m = _manifest(a.manifest)
    label = ClassLabel.parse(a.label)
    sources = m.of_class(label, Provenance.real)
    if not sources:
        raise UsageError(f"manifest has no real {label.name} images")
    out = augment_to_count(sources, a.target, AugmentationSpec(**_json_arg(a.spec)), a.seed, a.img_dir)
    write_manifest(m.with_records(out, notes=f"{label.name} augmented to {a.target}"), a.out)
    print(f"{label.name}: {len(sources)} real + {len(out) - len(sources)} augmented")


def cmd_gan_train(a):
    from .dataset import ClassLabel
    from .ugatit import TranslationConfig, train

    cfg = TranslationConfig(**{**_json_arg(a.config), **({"iterations": a.iterations} if a.iterations else {}),
                               "seed": a.seed})
    dom_a, dom_b = _manifest(a.domain_a), _manifest(a.domain_b)
    if a.label:
        label = ClassLabel.parse(a.label)
        dom_b = dom_b.subset(r.id for r in dom_b.of_class(label))
    ckpt = train(dom_a, dom_b, cfg, out_dir=a.out, snapshot_every=a.snapshot_every, log_every=a.log_every)
    last = ckpt.loss_history[-1]
    print(f"{ckpt.target_class.name}: {ckpt.iteration} iterations, g_total={last['g_total']:.4f}")


def cmd_gan_generate(a):
    from .dataset import write_manifest
    from .ugatit import generate, load_checkpoint

    ckpt = load_checkpoint(a.checkpoint)
    out = generate(ckpt, _manifest(a.source), a.n, a.seed, a.img_dir)
    write_manifest(out, a.out)
    print(f"generated {len(out)} {ckpt.target_class.name} images")


def cmd_balance(a):
    from .augment import AugmentationSpec
    from .balance import builtin_strategy, default_engines, execute, plan_balance
    from .dataset import ClassLabel, write_manifest

    real = _manifest(a.manifest).real()
    strategy = builtin_strategy(a.strategy, seed=a.seed, scale=a.scale, major_fill=a.major_fill)
    plan = plan_balance(real, strategy, _pairs(a.checkpoint, "--checkpoint"))
    if a.plan_only:
        print(json.dumps(plan.to_json(), indent=1))
        return
    normal = real.subset(r.id for r in real.of_class(ClassLabel.NORMAL))
    out = execute(plan, default_engines(a.img_dir, normal, AugmentationSpec(**_json_arg(a.spec))),
                  out_dir=Path(a.out).parent)
    write_manifest(out, a.out)
    for c in ClassLabel:
        print(c.name, out.provenance_histogram(c))


def _given(**flags) -> dict:
    return {k: v for k, v in flags.items() if v is not None}


def _backbone(a):
    """Backbone fields: ``--config``'s "backbone" section, then ``--backbone`` JSON, then flags."""
    from .classifier import BackboneConfig

    d = {**_json_arg(a.config).get("backbone", {}), **_json_arg(a.backbone),
         **_given(variant=a.variant, seed=a.seed, pretrained_weights=a.weights)}
    return BackboneConfig.from_json(d)


def _train_cfg(a):
    from .classifier import TrainConfig

    d = {**_json_arg(a.config).get("train", {}),
         **_given(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, seed=a.seed)}
    return TrainConfig(**d)


def cmd_train(a):
    from .classifier import build_model, fine_tune, predict, save_model
    from .pipeline import write_predictions

    bcfg = _backbone(a)
    val = _manifest(a.val) if a.val else None
    trained = fine_tune(build_model(bcfg), _manifest(a.manifest), val, _train_cfg(a),
                        freeze_policy=a.freeze_policy)
    save_model(trained, a.out)
    print(json.dumps(trained.log[-1]))
    if a.predict:
        test = _manifest(a.predict)
        probs, pred = predict(trained.model, test)
        target = a.predictions or str(Path(a.out) / "predictions.json")
        write_predictions(target, test, probs, pred)
        print(f"predictions for {len(test)} images written to {target}")


def cmd_crossval(a):
    from .classifier import cross_validate
    from .metrics import aggregate_folds, render_table

    results = cross_validate(_manifest(a.manifest), a.k, _backbone(a), _train_cfg(a), seed=a.seed or 0,
                             eval_manifest=_manifest(a.eval_manifest) if a.eval_manifest else None,
                             on_fold=lambda r: print(f"fold {r.fold}: BA={r.report.balanced_accuracy:.4f}"))
    agg = aggregate_folds([r.report for r in results])
    print(render_table({a.name: agg}, {a.name: agg.tpr_mean})["summary_text"], end="")
    if a.out:
        # a .json path is the report file itself; anything else is a directory for crossval.json
        target = Path(a.out) if a.out.endswith(".json") else Path(a.out) / "crossval.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps({"aggregate": agg.to_json(),
                                           "folds": [{"fold": r.fold, "confusion": r.confusion.tolist(),
                                                      "report": r.report.to_json()} for r in results]},
                                          indent=1, sort_keys=True) + "\n")


def cmd_evaluate(a):
    from .metrics import MetricReport, render_table
    from .pipeline import evaluate_predictions

    if not Path(a.predictions).is_file():
        raise UsageError(f"predictions file {a.predictions} does not exist")
    res = evaluate_predictions(a.predictions)
    rep = MetricReport.from_json(res["report"])
    print(json.dumps({k: res["report"][k] for k in ("accuracy", "kappa", "rci", "mcc", "balanced_accuracy")}))
    print(render_table(per_class={a.name: rep.per_class_tpr})["tpr_text"], end="")
    if a.out:
        Path(a.out).write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")


def cmd_embed(a):
    from .classifier import load_model
    from .embed import export, extract_features, tsne_3d

    trained = load_model(a.model)
    feats = extract_features(trained.model, _manifest(a.manifest), layer=a.layer)
    emb = tsne_3d(feats, perplexity=a.perplexity, iterations=a.iterations, seed=a.seed)
    info = export(emb, [c.name for c in feats.labels], feats.ids, a.csv, a.plot, title=a.title)
    meta = {**info, "kl": emb.kl, "manifest": str(Path(a.manifest).resolve()), "model": str(Path(a.model).resolve()),
            "perplexity": a.perplexity, "iterations": a.iterations, "seed": a.seed}
    Path(a.csv).with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    print(json.dumps(meta))


def _load_config(a):
    from .pipeline import ExperimentConfig

    if not Path(a.config).is_file():
        raise UsageError(f"config {a.config} does not exist")
    cfg = ExperimentConfig.load(a.config)
    if getattr(a, "output_root", None):
        cfg.output_root = str(Path(a.output_root).resolve())
    return cfg


def cmd_validate(a):
    from .pipeline import ConfigError, validate

    errors = validate(_load_config(a))
    if errors:
        raise ConfigError(errors)
    print("ok")


def cmd_run(a):
    from .pipeline import run

    record = run(_load_config(a), stages=a.stages, force=a.force)
    for s in record.stages:
        print(f"{s.name:13s} {s.status:8s} {s.seconds:8.1f}s" + (f"  {s.error}" if s.error else ""))
    if record.status != "complete":
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(a):
    root = Path(a.output_root) / "stages" / "report" / "metrics.txt"
    if not root.is_file():
        raise UsageError(f"no report under {a.output_root}; run the report stage first")
    print(root.read_text(), end="")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _classifier_args(p):
    p.add_argument("--config", help='JSON file or string with "backbone" and "train" sections')
    p.add_argument("--variant", choices=("toy_cnn", "inception_v3_like"))
    p.add_argument("--backbone", help="extra BackboneConfig fields as JSON (or a JSON file)")
    p.add_argument("--weights", help="pretrained weights directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octfew", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="scan a class-per-directory image tree into a manifest")
    p.add_argument("root")
    p.add_argument("--out", required=True)
    p.add_argument("--map", action="append", metavar="DIR=CLASS")
    p.add_argument("--ignore", action="append", metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic 9-class image corpus")
    p.add_argument("root")
    p.add_argument("--count", action="append", metavar="CLASS=N")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("augment", help="augment one class up to a target count")
    p.add_argument("--manifest", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--img-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="AugmentationSpec fields as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("gan-train", help="train a normal -> pathology translation model")
    p.add_argument("--domain-a", required=True)
    p.add_argument("--domain-b", required=True)
    p.add_argument("--label", help="restrict domain B to this class")
    p.add_argument("--config", help="TranslationConfig fields as JSON (or a JSON file)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gan_train)

    p = sub.add_parser("gan-generate", help="translate normal images with a trained checkpoint")
    p.add_argument("--checkpoint", "--ckpt", dest="checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--n", "--count", dest="n", type=int, required=True)
    p.add_argument("--img-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gan_generate)

    p = sub.add_parser("balance", help="compose a balanced dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", required=True, choices=("imb_5000", "bal_5000", "bal_10000"))
    p.add_argument("--checkpoint", action="append", metavar="CLASS=DIR")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--major-fill", default="sample", choices=("sample", "topup"))
    p.add_argument("--img-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="AugmentationSpec fields as JSON")
    p.add_argument("--plan-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_balance)

    p = sub.add_parser("train", help="fine-tune a classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val")
    p.add_argument("--freeze-policy", choices=("final_layers_only", "full"))
    p.add_argument("--predict", metavar="MANIFEST", help="also predict this manifest")
    p.add_argument("--predictions", help="where to write predictions (default: OUT/predictions.json)")
    p.add_argument("--out", required=True)
    _classifier_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", help="extra real images that are tested but never trained on")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--name", default="model")
    p.add_argument("--out", help="report directory, or a .json file path")
    _classifier_args(p)
    p.set_defaults(fn=cmd_crossval)

    p = sub.add_parser("evaluate", help="score a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--name", default="model")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("embed", help="3-D t-SNE of penultimate features")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", "--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", "--out", dest="csv", required=True, help="coordinates CSV (id,label,x,y,z)")
    p.add_argument("--plot")
    p.add_argument("--title", default="")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("validate", help="check an experiment file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("run", help="run an experiment file")
    p.add_argument("config")
    p.add_argument("--stages", nargs="+", metavar="STAGE")
    p.add_argument("--force", action="store_true")
    p.add_argument("--output-root", help="override the config's output_root")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="print the metric tables of a finished run")
    p.add_argument("output_root")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    from .balance import BalanceError
    from .dataset import ManifestError
    from .pipeline import ConfigError, PreconditionError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.fn(args) or EXIT_OK
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ManifestError, PreconditionError, BalanceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
