"""Command-line interface: ``tipstate {generate,train,evaluate,classify,plot}``.

Exit codes: 0 success, 1 usage error, 2 data error.  Set ``TIPSTATE_THREADS``
to cap BLAS threads (1 gives bit-exact reruns).
"""
from __future__ import annotations

import os

_threads = os.environ.get("TIPSTATE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import ForestConfig, forest_predict_images, forest_train, load_forest, save_forest
from .ensemble import (ABSTAIN, EnsembleModel, GoodBadMap, collapse_labels, collapse_scores,
                       load_ensemble, vote_batch, write_ensemble_manifest)
from .errors import TipStateError
from .imagecore import (SURFACE_CLASS_SETS, Surface, class_names, class_stats, label_indices,
                        load_dataset, read_image, split_dataset)
from .metrics import build_report, emit_report, plot_from_csv
from .seeding import derive_seed
from .synthgen import SynthParams, SynthSpec, gen_dataset
from .trainpipe import TrainConfig, evaluate_array, train
from .zoo import build, load_checkpoint, read_container, save_checkpoint

ARCHS = ("squeezenet", "vgg", "vgg-bn", "rw", "rfc")
OPTIMIZERS = ("sgd", "adam", "rmsprop", "adadelta", "adagrad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_class_set(surface: str) -> str:
    return SURFACE_CLASS_SETS[Surface(surface)][0]


def _write_record(out: Path, command: str, args: argparse.Namespace, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "versions": {"tipstate": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "threads": os.environ.get("TIPSTATE_THREADS"),
    }
    if extra:
        record.update(extra)
    (out / f"run_{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True,
                                                        default=str) + "\n", encoding="utf-8")


def _load_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- generate ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    conf = _load_config(args.config)
    if args.surface:
        conf["surface"] = args.surface
    conf.setdefault("surface", "SiH100")
    if args.class_set:
        conf["class_set"] = args.class_set
    conf.setdefault("class_set", _default_class_set(conf["surface"]))
    if args.count is not None:
        conf["count"] = args.count
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.side is not None:
        conf.setdefault("params", {})["side"] = args.side
    spec = SynthSpec.from_dict(conf)
    out = Path(args.out)
    manifest = gen_dataset(spec, out)
    _write_record(out, "generate", args, {"synth_spec": json.loads(spec.to_json())})
    print(manifest)
    return 0


# -- train ---------------------------------------------------------------------

def _parse_members(args):
    if args.members:
        members = []
        for item in args.members.split(","):
            parts = item.split(":")
            if len(parts) != 3 or parts[0] not in ARCHS[:-1] or parts[1] not in OPTIMIZERS:
                raise UsageError(f"--members entries look like arch:optimizer:lr, got {item!r}")
            members.append((parts[0], parts[1], float(parts[2])))
        return members
    return [(args.arch, args.optimizer, args.lr)]


def _dataset_split(args):
    samples = load_dataset(args.data)
    if not samples:
        raise TipStateError(f"{args.data}: empty dataset")
    surface = samples[0].surface
    key = args.class_set or _default_class_set(surface.value)
    classes = class_names(key)
    split = split_dataset(samples, args.holdout, args.seed)
    return split, classes


def cmd_train(args) -> int:
    members = _parse_members(args)
    conf = _load_config(args.config)
    split, classes = _dataset_split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = class_stats(split.train, classes)
    paths = []
    for i, (arch, opt, lr) in enumerate(members):
        name = f"member{i}" if len(members) > 1 else "model"
        if arch == "rfc":
            fc = ForestConfig(tree_count=args.trees, seed=derive_seed(args.seed, "rfc", i))
            model = forest_train(list(split.train), fc, classes)
            paths.append(save_forest(model, out / f"{name}.tsck"))
            continue
        cfg_d = dict(conf)
        cfg_d.update(batch_size=args.batch, image_side=args.side, optimizer=opt,
                     learning_rate=lr, seed=derive_seed(args.seed, "train", i))
        for key in ("epochs", "lr_decay", "early_stop_patience", "augment_repeats"):
            val = getattr(args, key)
            if val is not None:
                cfg_d[key] = val
        cfg = TrainConfig.from_dict(cfg_d)
        dtype = np.float64 if args.precision == "float64" else np.float32
        net = build(arch, len(classes), cfg.image_side, dtype=dtype,
                    seed=derive_seed(args.seed, "init", i))
        net.classes = classes

        def progress(epoch, h, name=name):
            if not args.quiet:
                print(f"{name} epoch {epoch}: train_loss={h.train_loss[-1]:.4f} "
                      f"test_loss={h.test_loss[-1]:.4f} bal_acc={h.balanced_accuracy[-1]:.4f}",
                      file=sys.stderr)

        net, hist = train(net, split, stats, cfg, progress=progress)
        hist.write_csv(out / f"{name}_history.csv")
        paths.append(save_checkpoint(net, out / f"{name}.tsck", training_seed=cfg.seed,
                                     extra={"train_config": asdict(cfg)}))
    if len(paths) > 1:
        write_ensemble_manifest(out / "ensemble.json", paths, args.threshold or 0.0)
    (out / "split.json").write_text(json.dumps(
        {part: sorted(split.ids(part)) for part in ("train", "test", "holdout")}, indent=1) + "\n",
        encoding="utf-8")
    _write_record(out, "train", args)
    for p in paths:
        print(p)
    return 0


# -- evaluate / classify ------------------------------------------------------------

class _ForestMember:
    def __init__(self, model):
        self.model = model
        self.classes = model.classes
        self.input_side = model.config.side

    def predict(self, images, batch_size=128):
        return forest_predict_images(self.model, images)


def _load_model(args):
    if args.ensemble:
        return load_ensemble(args.ensemble, args.threshold)
    if not args.checkpoint:
        raise UsageError("one of --checkpoint or --ensemble is required")
    header, _ = read_container(args.checkpoint)
    member = (_ForestMember(load_forest(args.checkpoint)) if header["architecture_id"] == "rfc"
              else load_checkpoint(args.checkpoint))
    return EnsembleModel([member], args.threshold or 0.0)


def _images_for(model, samples):
    from .trainpipe import _images
    return _images(samples, model.input_side, np.float64)


def cmd_evaluate(args) -> int:
    split, classes = _dataset_split(args)
    samples = (list(split.train) + list(split.test) + list(split.holdout) if args.split == "all"
               else list(getattr(split, args.split)))
    model = _load_model(args)
    if tuple(model.classes) != tuple(classes):
        raise TipStateError(f"model classes {model.classes} != dataset classes {classes}")
    conf, mean, votes = model.predict_batch(_images_for(model, samples))
    truths = label_indices(samples, classes)
    report_classes, scores, preds = classes, mean, votes
    if args.collapse_good_bad:
        gb = GoodBadMap.from_class_set(args.class_set or _default_class_set(samples[0].surface.value))
        scores = collapse_scores(mean, classes, gb)
        preds = collapse_labels(votes, classes, gb)
        truths = collapse_labels(truths, classes, gb)
        report_classes = ("Good", "Bad")
    report = build_report(scores, truths, report_classes, preds)
    out = Path(args.out)
    emit_report(report, out, title=f"{args.split} ({len(samples)} images)")
    _write_record(out, "evaluate", args)
    sys.stdout.write((out / "summary.txt").read_text(encoding="utf-8"))
    return 0


def cmd_classify(args) -> int:
    model = _load_model(args)
    images = [read_image(p) for p in args.image]
    from .imagecore import resize
    x = np.stack([(im if im.shape == (model.input_side,) * 2 else resize(im, model.input_side)).values
                  for im in images])
    _, mean, votes = model.predict_batch(x)
    for path, m, v in zip(args.image, mean, votes):
        label = "Abstain" if v == ABSTAIN else model.classes[v]
        c = float(m[v]) if v != ABSTAIN else float(m.max())
        print(f"{path}\t{label}\t{c:.6f}")
    return 0


def cmd_plot(args) -> int:
    for p in plot_from_csv(args.report, args.out):
        print(p)
    return 0


# -- parser ---------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file with default options")
    common.add_argument("--out", default="out")
    common.add_argument("--precision", choices=("float32", "float64"), default="float32")

    data = _Parser(add_help=False)
    data.add_argument("--data", required=True, help="dataset manifest.tsv")
    data.add_argument("--class-set", choices=("si4", "si-tipchange", "metal6"))
    data.add_argument("--holdout", type=int, default=0, help="holdout size used to split --data")

    model = _Parser(add_help=False)
    model.add_argument("--checkpoint")
    model.add_argument("--ensemble", help="ensemble manifest (JSON)")
    model.add_argument("--threshold", type=float, default=None)

    p = _Parser(prog="tipstate", description="STM tip-state classification toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    g.add_argument("--surface", choices=[s.value for s in Surface])
    g.add_argument("--class-set", choices=("si4", "si-tipchange", "metal6"))
    g.add_argument("--count", type=int)
    g.add_argument("--side", type=int)
    g.set_defaults(func=cmd_generate, seed=None)

    t = sub.add_parser("train", parents=[common, data], help="train a model or an ensemble")
    t.add_argument("--arch", choices=ARCHS, default="squeezenet")
    t.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--members", help="comma list arch:optimizer:lr (writes ensemble.json)")
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--side", type=int, default=128)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-decay", dest="lr_decay", type=float)
    t.add_argument("--patience", dest="early_stop_patience", type=int)
    t.add_argument("--augment-repeats", dest="augment_repeats", type=int)
    t.add_argument("--trees", type=int, default=100)
    t.add_argument("--threshold", type=float, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common, data, model], help="metrics report")
    e.add_argument("--split", choices=("train", "test", "holdout", "all"), default="holdout")
    e.add_argument("--collapse-good-bad", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("classify", parents=[model], help="label individual image files")
    c.add_argument("--image", nargs="+", required=True)
    c.set_defaults(func=cmd_classify)

    pl = sub.add_parser("plot", help="SVG curves from report CSVs")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (TipStateError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
