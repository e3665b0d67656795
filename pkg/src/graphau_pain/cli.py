"""Command-line entry point.

Subcommands::

    synth         render a labelled synthetic dataset
    prepare       relabel / undersample / split a manifest
    pretrain-au   AU-occurrence training of backbone and AU branch
    train         pain-category training (optionally from a pretrained checkpoint)
    evaluate      metrics, confusion matrix and per-frame AU predictions
    ablate        train and evaluate the four model wirings on identical data
    report        re-render tables and figures from saved report files

Every run writes into its own output directory (``--out``; default
``$GRAPHAU_PAIN_OUT/<subcommand>-seed<seed>``), guarded by a lock file, and
leaves a resolved config snapshot there.  Exit codes: 0 ok, 1 usage or config
error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .data.images import load_images, save_png
from .data.manifest import load_manifest, manifest_root, meta_path, save_manifest
from .data.prep import merge_hybrid, split_frames, split_subject_disjoint, undersample
from .data.synth import DEFAULT_CELLS, SynthConfig, cell_regions, synth_generate
from .errors import ConfigError, DataError, GraphAUError, InvalidConfig
from .evaluation import (
    MetricsReport,
    evaluate_model,
    format_ablation_table,
    format_au_table,
    format_pain_table,
    render_confusion_log10,
    render_confusion_png,
    write_reports,
)
from .facs import SCHEMES
from .model import ABLATIONS, GraphAUPain, ModelConfig
from .training import Checkpoint, TrainConfig, predict, pretrain_au, train_pain

log = logging.getLogger("graphau_pain")

LOCK_NAME = ".lock"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- run plumbing

@contextmanager
def run_dir(path: Path):
    """Create ``path`` and hold its lock file for the duration of the run."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{path} is in use by another run (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfgmod.default_out_root()) / f"{args.command}-seed{cfg['seed']}"


def _image_root(path, manifest) -> str:
    """Derived manifests remember where their source's relative image paths live."""
    return manifest.provenance.get("image_root") or manifest_root(path)


def _load(path):
    m = load_manifest(path)
    return m, _image_root(path, m)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model_config(cfg, d_pain: int, n_au: int, ablation=None) -> ModelConfig:
    side = cfg["model.image_side"]
    positions = 36 if cfg["model.backbone"] == "paper" else (side // 16) ** 2
    mc = ModelConfig(n_au=n_au, d_au=cfg["model.d_au"], positions=positions,
                     channels=cfg["model.channels"], proj_dim=positions, k=cfg["model.k"],
                     d_pain=d_pain, backbone=cfg["model.backbone"], image_side=side,
                     ablation=ablation or cfg["model.ablation"])
    return mc.validate()


def _class_weights(raw: str):
    raw = raw.strip()
    if raw == "auto":
        return None
    if raw == "uniform":
        return "uniform"
    try:
        return [float(x) for x in raw.split(",")]
    except ValueError:
        raise ConfigError(f"train.class_weights must be auto, uniform or numbers; got {raw!r}") from None


def sft_config(cfg) -> TrainConfig:
    return TrainConfig.au_sft(lr=cfg["sft.lr"], batch_size=cfg["sft.batch_size"],
                              epochs=cfg["sft.epochs"], weight_decay=cfg["sft.weight_decay"],
                              seed=cfg["seed"]).validate()


def pain_config(cfg) -> TrainConfig:
    return TrainConfig.pain(lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
                            epochs=cfg["train.epochs"], weight_decay=cfg["train.weight_decay"],
                            seed=cfg["seed"], class_weights=_class_weights(cfg["train.class_weights"]),
                            scheme=cfg["train.scheme"], val_fraction=cfg["train.val_fraction"]).validate()


def _check_scheme(name):
    if name not in SCHEMES:
        raise ConfigError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}")
    return name


# ---------------------------------------------------------------- subcommands

def _parse_regions(text):
    regions = {}
    try:
        for item in text.split(","):
            code, rect = item.split(":")
            r0, c0, r1, c1 = (int(v) for v in rect.split("."))
            regions[int(code)] = (r0, c0, r1, c1)
    except ValueError:
        raise InvalidConfig(f"synth.regions: expected code:r0.c0.r1.c1,... got {text!r}") from None
    return regions


def _regions(cfg):
    """Built-in layout for the configured side, with any ``synth.regions`` entries replacing it per AU."""
    if not cfg["synth.regions"]:
        return None
    regions = cell_regions(cfg["synth.side"], DEFAULT_CELLS)
    regions.update(_parse_regions(cfg["synth.regions"]))
    return regions


def cmd_synth(args, cfg, out: Path) -> int:
    sc = SynthConfig(side=cfg["synth.side"], count=cfg["synth.count"], seed=cfg["seed"],
                     noise=cfg["synth.noise"], mixture=cfg["synth.mixture"],
                     modeled_aus=cfg["synth.modeled_aus"], n_subjects=cfg["synth.n_subjects"],
                     frame_prefix=cfg["synth.frame_prefix"], subject_prefix=cfg["synth.subject_prefix"],
                     cooccur=cfg["synth.cooccur"], distractor_rate=cfg["synth.distractor_rate"],
                     regions=_regions(cfg))
    mode = cfg["synth.image_refs"]
    if mode not in ("png", "uri"):
        raise ConfigError("synth.image_refs must be png or uri")
    manifest, images = synth_generate(sc, render=True)
    if mode == "png":
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        records = []
        for r, img in zip(manifest.records, images):
            ref = f"images/{r.frame_id}.png"
            save_png(img, out / ref)
            records.append(replace(r, image_ref=ref))
        manifest = manifest.derive(records, op="write_png")
    path = out / "manifest.jsonl"
    save_manifest(manifest, path)
    print(f"wrote {len(manifest)} frames to {path}")
    print(f"manifest sha256 {_sha256(path)}")
    return 0


def _read_predictions(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["frame_id"])] = {int(k): int(v) for k, v in obj["au"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction line ({exc})") from None
    return out


def _codes(text):
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated AU codes, got {text!r}") from None


def cmd_prepare(args, cfg, out: Path) -> int:
    src = Path(args.manifest)
    manifest, root = _load(src)
    touched = any(v is not None for v in (args.relabel_from, args.undersample_keep, args.split))
    if not touched:
        shutil.copyfile(src, out / "manifest.jsonl")
        stamp = {"modeled_aus": list(manifest.modeled_aus),
                 "provenance": {**manifest.provenance, "image_root": root,
                                "copied_from": str(src), "source_sha256": _sha256(src)}}
        meta_path(out / "manifest.jsonl").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n",
                                                      encoding="utf-8")
        print(f"copied {len(manifest)} frames to {out / 'manifest.jsonl'}")
        return 0
    manifest.provenance.setdefault("image_root", root)
    if args.relabel_from is not None:
        if not args.fill_aus:
            raise ConfigError("--relabel-from needs --fill-aus")
        fill = _codes(args.fill_aus)
        overlap = _codes(args.overlap_aus) if args.overlap_aus else [
            c for c in manifest.modeled_aus if c not in fill]
        manifest = merge_hybrid(manifest, _read_predictions(args.relabel_from), overlap, fill)
        print(f"relabelled {len(manifest)} frames (fill AUs {fill})")
    if args.undersample_keep is not None:
        before = len(manifest)
        n_zero = sum(1 for r in manifest.records if r.pspi == 0)
        manifest = undersample(manifest, args.undersample_keep, cfg["seed"])
        step = manifest.provenance["history"][-1]
        kept_zero = sum(1 for r in manifest.records if r.pspi == 0)
        print(f"undersample: {before} -> {len(manifest)} frames; PSPI=0 kept {kept_zero} of {n_zero} "
              f"(expected {args.undersample_keep * (n_zero - step['excluded_inactive']):.1f}); "
              f"{step['excluded_inactive']} frames without active AUs excluded")
    if args.split is not None:
        splitter = split_frames if args.split_by == "frame" else split_subject_disjoint
        train, test = splitter(manifest, args.split, cfg["seed"])
        save_manifest(train, out / "train.jsonl")
        save_manifest(test, out / "test.jsonl")
        print(f"split by {args.split_by}: {len(train)} train / {len(test)} test frames")
    else:
        save_manifest(manifest, out / "manifest.jsonl")
        print(f"wrote {len(manifest)} frames to {out / 'manifest.jsonl'}")
    return 0


def _init_checkpoint(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise DataError(f"initial checkpoint not found: {path}")
    return Checkpoint.load(path)


def run_pretrain(cfg, manifest, root, ablation=None, log_path=None, images=None):
    model = GraphAUPain(_model_config(cfg, len(SCHEMES[cfg["train.scheme"]]), len(manifest.modeled_aus),
                                      ablation), seed=cfg["seed"])
    return model, pretrain_au(model, manifest, sft_config(cfg), images=images, root=root, log_path=log_path)


def cmd_pretrain_au(args, cfg, out: Path) -> int:
    manifest, root = _load(args.manifest)
    _, ckpt = run_pretrain(cfg, manifest, root, log_path=out / "train_log.jsonl")
    ckpt.save(out / "checkpoint.npz")
    last = ckpt.metrics[-1] if ckpt.metrics else {}
    print(f"saved {out / 'checkpoint.npz'}" + (f"; final mean AU F1 {last['au_f1_mean']:.2f}" if last else ""))
    return 0


def run_train(cfg, manifest, root, init=None, ablation=None, log_path=None, images=None):
    tc = pain_config(cfg)
    model = GraphAUPain(_model_config(cfg, len(SCHEMES[tc.scheme]), len(manifest.modeled_aus), ablation),
                        seed=cfg["seed"])
    return model, train_pain(model, manifest, tc, init=init, images=images, root=root, log_path=log_path)


def cmd_train(args, cfg, out: Path) -> int:
    init = _init_checkpoint(args.init)
    manifest, root = _load(args.manifest)
    _, ckpt = run_train(cfg, manifest, root, init=init, log_path=out / "train_log.jsonl")
    ckpt.save(out / "checkpoint.npz")
    print(f"saved {out / 'checkpoint.npz'}")
    return 0


def _write_predictions(path, manifest, probs, threshold):
    with open(path, "w", encoding="utf-8") as fh:
        for r, p in zip(manifest.records, probs):
            au = {str(c): int(v >= threshold) for c, v in zip(manifest.modeled_aus, p)}
            fh.write(json.dumps({"frame_id": r.frame_id, "au": au, "prob": [float(v) for v in p]}) + "\n")


def cmd_evaluate(args, cfg, out: Path) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = Checkpoint.load(args.checkpoint).to_model()
    manifest, root = _load(args.manifest)
    scheme = _check_scheme(cfg["eval.scheme"])
    images = load_images(manifest, root)
    report, au = evaluate_model(model, manifest, scheme, images=images)
    write_reports(out, report, au, png=cfg["eval.png"])
    if model.config.ablation != "backbone_only" and len(manifest.modeled_aus) == model.config.n_au:
        _write_predictions(out / "predictions.jsonl", manifest, predict(model, images)["probs"], model.threshold)
    print(format_pain_table(report), end="")
    if au is not None:
        print()
        print(format_au_table(au), end="")
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    modes = [m.strip() for m in cfg["ablate.modes"].split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation modes {bad}; choose from {ABLATIONS}")
    train_m, root = _load(args.train)
    test_m, test_root = _load(args.test)
    sft_m, sft_root = _load(args.sft) if args.sft else (train_m, root)
    train_x, test_x = load_images(train_m, root), load_images(test_m, test_root)
    sft_x = train_x if not args.sft else load_images(sft_m, sft_root)
    scheme = cfg["train.scheme"]
    reports = {}
    for mode in modes:
        init = None
        if mode != "backbone_only":
            _, init = run_pretrain(cfg, sft_m, sft_root, ablation=mode, images=sft_x)
        model, ckpt = run_train(cfg, train_m, root, init=init, ablation=mode, images=train_x,
                                log_path=out / f"train_log_{mode}.jsonl")
        ckpt.save(out / f"checkpoint_{mode}.npz")
        reports[mode], _ = evaluate_model(model, test_m, scheme, images=test_x)
        log.info("%s macro-F1 %.2f", mode, reports[mode].macro_f1)
    table = format_ablation_table(reports)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=2) + "\n", encoding="utf-8")
    print(table, end="")
    return 0


def _report_files(paths):
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "report.json"
        if not p.exists():
            raise DataError(f"report not found: {p}")
        yield p


def cmd_report(args, cfg, out: Path) -> int:
    for i, path in enumerate(_report_files(args.reports)):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            report = MetricsReport.from_dict(payload["pain"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: not a report file ({exc})") from None
        stem = f"report{i}" if len(args.reports) > 1 else "report"
        text = format_pain_table(report)
        if payload.get("au"):
            text += "\n" + format_au_table(payload["au"])
        (out / f"{stem}.txt").write_text(text, encoding="utf-8")
        (out / f"{stem}_confusion.txt").write_text(
            render_confusion_log10(report.confusion, report.class_names), encoding="utf-8")
        if cfg["eval.png"]:
            render_confusion_png(report.confusion, out / f"{stem}_confusion.png", report.class_names,
                                 title=str(path.parent.name))
        print(f"== {path}")
        print(text, end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain-au": cmd_pretrain_au,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="desk",
                        help="default set: desk-scale (default) or the full-size paper settings")
    common.add_argument("--seed", type=int, help="overrides the 'seed' key")
    common.add_argument("--out", help=f"output directory (default ${cfgmod.OUT_ROOT_ENV}/<command>-seed<seed>)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="graphau-pain", description="AU-graph pain intensity pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    p.add_argument("--count", type=int, help="overrides synth.count")

    p = sub.add_parser("prepare", parents=[common], help="relabel, undersample or split a manifest")
    p.add_argument("manifest")
    p.add_argument("--relabel-from", help="JSON-lines AU predictions used to fill missing AUs")
    p.add_argument("--fill-aus", help="AU codes taken from the predictions, e.g. 9,12")
    p.add_argument("--overlap-aus", help="AU codes kept from the original labels (default: the rest)")
    p.add_argument("--undersample-keep", type=float, help="keep rate for PSPI=0 frames")
    p.add_argument("--split", type=float, metavar="TEST_FRACTION", help="write train.jsonl / test.jsonl")
    p.add_argument("--split-by", choices=("subject", "frame"), default="subject",
                   help="subject-disjoint (default) or frame-wise split")

    p = sub.add_parser("pretrain-au", parents=[common], help="AU-occurrence training")
    p.add_argument("manifest")

    p = sub.add_parser("train", parents=[common], help="pain-category training")
    p.add_argument("manifest")
    p.add_argument("--init", help="checkpoint from pretrain-au")
    p.add_argument("--scheme", choices=sorted(SCHEMES), help="overrides train.scheme")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--scheme", choices=sorted(SCHEMES), help="overrides eval.scheme")

    p = sub.add_parser("ablate", parents=[common], help="compare the four model wirings")
    p.add_argument("--train", required=True, help="pain training manifest")
    p.add_argument("--test", required=True, help="evaluation manifest")
    p.add_argument("--sft", help="AU pretraining manifest (default: the training manifest)")

    p = sub.add_parser("report", parents=[common], help="render tables and figures from report files")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    return parser


def _flag_values(args) -> dict:
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if getattr(args, "count", None) is not None:
        extra["synth.count"] = args.count
    if getattr(args, "scheme", None) is not None:
        extra["eval.scheme" if args.command == "evaluate" else "train.scheme"] = args.scheme
    return extra


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = cfgmod.resolve(args.config, args.overrides, args.preset, _flag_values(args))
        out = _out_dir(args, cfg)
        with run_dir(out):
            cfgmod.write_snapshot(cfg, out)
            return COMMANDS[args.command](args, cfg, out)
    except GraphAUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
