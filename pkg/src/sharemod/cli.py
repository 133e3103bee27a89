"""Command-line front end: ``gen``, ``train``, ``transform`` and ``eval``.

Every option is also a config-file key. A config file holds ``key = value``
lines (``#`` starts a comment); values resolve as built-in defaults, then
the file, then command-line flags. The whole configuration is validated
before anything is written.

Dataset directory layout written by ``gen``::

    stats.txt             normalization percentiles of the training set
    train.csv             xPath,yPath,seed
    eval.csv              xPath,yPath,seed,warpedXPath,t00,...,t22
    train/NNNN_x.smt ...  tensors referenced by the manifests
"""

import argparse
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, shared, synthgen
from .diffnet import CheckpointError, LrSchedule, NonFiniteGradient
from .image import NormalizationStats, load_smt, save_smt
from .matchreg import format_homography, parse_homography
from .similarity import ssim

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_MODEL, EXIT_EMPTY = range(6)


class UsageError(Exception):
    pass


class EmptyEvaluation(Exception):
    pass


# -- option registry --------------------------------------------------------------


def _int_list(text):
    vals = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    if not vals:
        raise ValueError("empty list")
    return tuple(vals)


def _delta_grid(text):
    """``start:stop:step`` (inclusive) or a comma list."""
    text = str(text).strip()
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0 or stop < start:
            raise ValueError("grid needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + k * step, 12) for k in range(n))
    return tuple(float(v) for v in text.split(","))


@dataclass(frozen=True)
class Option:
    key: str
    convert: object
    default: object
    module: str
    help: str
    choices: tuple = ()


_SCENE = [
    Option("size", int, 64, "synthgen", "image side length in pixels"),
    Option("region-count", int, 12, "synthgen", "Voronoi regions per scene"),
    Option("optical-noise-sigma", float, 0.02, "synthgen", "optical Gaussian noise"),
    Option("speckle-looks", float, 4, "synthgen", "SAR speckle looks L"),
    Option("illumination", float, 0.2, "synthgen", "optical illumination field strength"),
    Option("coupling", float, 0.8, "synthgen", "cross-modal copula correlation"),
]
_WARP = [
    Option("max-shift", float, 32.0, "synthgen", "eval warp: max translation (px)"),
    Option("max-rotation", float, 15.0, "synthgen", "eval warp: max rotation (deg)"),
    Option("scale-min", float, 0.9, "synthgen", "eval warp: min scale"),
    Option("scale-max", float, 1.1, "synthgen", "eval warp: max scale"),
]
_TD = shared.TrainConfig()
_TRAIN = [
    Option("variant", str, "v2", "shared", "degeneracy measure", ("v1", "v2")),
    Option("alpha", float, None, "shared", "degeneracy weight"),
    Option("beta", float, None, "shared", "MSE weight"),
    Option("gamma", float, None, "shared", "DiSSIM weight"),
    Option("eta", float, None, "shared", "optical reconstruction weight, v1 only"),
    Option("shared-channels", int, _TD.shared_channels, "shared", "channels K of the shared modality"),
    Option("epochs", int, _TD.epochs, "shared", "training epochs"),
    Option("batch-size", int, _TD.batch_size, "shared", "samples per batch"),
    Option("batches-per-epoch", int, None, "shared", "optimizer steps per epoch"),
    Option("base-lr", float, _TD.schedule.base_lr, "diffnet", "learning rate after warmup"),
    Option("warmup-lr", float, _TD.schedule.warmup_lr, "diffnet", "learning rate at epoch 0"),
    Option("warmup-epochs", int, _TD.schedule.warmup_epochs, "diffnet", "length of the linear warmup"),
    Option("depth", int, _TD.depth, "diffnet", "encoder/decoder levels"),
    Option("base-width", int, _TD.base_width, "diffnet", "filters at the first level"),
    Option("rgb-indices", _int_list, _TD.rgb_indices, "shared", "optical bands forming RGB"),
]
_MATCH = [
    Option("pipeline", str, "auto", "evaluation", "none, shared, both, or auto", ("auto", "none", "shared", "both")),
    Option("delta-grid", _delta_grid, (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0), "evaluation",
           "thresholds, start:stop:step or comma list"),
    Option("max-keypoints", int, 4096, "matchreg", "keypoints kept per image"),
    Option("patch-size", int, 16, "matchreg", "descriptor patch side"),
    Option("inlier-threshold", float, 3.0, "matchreg", "RANSAC inlier distance (px)"),
    Option("max-iterations", int, 2000, "matchreg", "RANSAC hypotheses"),
    Option("rgb-indices", _int_list, (2, 1, 0), "evaluation", "optical bands forming RGB"),
]
_SEED = Option("seed", int, 0, "cli", "root random seed")

COMMANDS = {
    "gen": [
        Option("out", str, "data", "cli", "dataset directory to create"),
        Option("count", int, 200, "synthgen", "training pairs"),
        Option("eval-count", int, 50, "synthgen", "warped evaluation pairs"),
        _SEED, *_SCENE, *_WARP,
    ],
    "train": [
        Option("data", str, "data", "cli", "dataset directory"),
        Option("checkpoint", str, "model.smck", "cli", "output checkpoint"),
        Option("trace", str, "loss.csv", "cli", "output loss trace CSV"),
        Option("checkpoint-dir", str, "", "cli", "optional per-epoch checkpoint directory"),
        _SEED, *_TRAIN,
    ],
    "transform": [
        Option("data", str, "data", "cli", "dataset directory"),
        Option("checkpoint", str, "model.smck", "cli", "trained checkpoint"),
        Option("split", str, "eval", "cli", "which manifest to transform", ("train", "eval")),
        Option("out", str, "shared", "cli", "output directory"),
    ],
    "eval": [
        Option("data", str, "data", "cli", "dataset directory"),
        Option("checkpoint", str, "", "cli", "trained checkpoint (enables the shared pipeline)"),
        Option("out", str, "report", "cli", "report directory"),
        _SEED, *_MATCH,
    ],
}
HELP = {
    "gen": "generate synthetic training and warped evaluation pairs",
    "train": "train a shared-modality model",
    "transform": "map pairs into the shared modality",
    "eval": "match and score evaluation pairs",
}


def _dest(key):
    return key.replace("-", "_")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="sharemod", description="Shared-modality registration toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name] + ".",
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog="Every flag is also a config-file key (key = value).")
        p.add_argument("--config", default=None, help="key = value config file (default: none) [cli]")
        for opt in options:
            shown = opt.default
            if isinstance(shown, tuple):
                shown = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in shown)
            if shown is None:
                shown = "per variant"
            text = f"{opt.help} (default: {shown if shown != '' else 'none'}) [{opt.module}]"
            kw = {"choices": opt.choices} if opt.choices else {}
            p.add_argument(f"--{opt.key}", dest=_dest(opt.key), default=None, help=text, metavar="V", **kw)
    return parser


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("_", "-")] = value
    return values


def resolve(command, args):
    """Merge defaults < config file < flags into ``key -> typed value``."""
    options = {o.key: o for o in COMMANDS[command]}
    raw = {}
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in options:
                raise UsageError(f"unknown config key {key!r} for {command}")
            raw[key] = value
    for key in options:
        flag = getattr(args, _dest(key))
        if flag is not None:
            raw[key] = flag
    cfg = {}
    for key, opt in options.items():
        if key not in raw:
            cfg[key] = opt.default
            continue
        try:
            cfg[key] = opt.convert(raw[key])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid value for {key}: {raw[key]!r} ({exc})") from exc
        if opt.choices and cfg[key] not in opt.choices:
            raise UsageError(f"{key} must be one of {opt.choices}")
    return cfg


# -- config builders (validation happens here) ---------------------------------------


def _checked(build, what):
    try:
        return build()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what}: {exc}") from exc


def scene_spec(cfg):
    return _checked(lambda: synthgen.SceneSpec(
        size=cfg["size"], region_count=cfg["region-count"], optical_noise_sigma=cfg["optical-noise-sigma"],
        speckle_looks=cfg["speckle-looks"], illumination=cfg["illumination"], coupling=cfg["coupling"],
        seed=cfg["seed"]), "scene settings")


def train_config(cfg):
    def build():
        base = shared.V1_WEIGHTS if cfg["variant"] == "v1" else shared.V2_WEIGHTS
        weights = shared.LossWeights(
            alpha=base.alpha if cfg["alpha"] is None else cfg["alpha"],
            beta=base.beta if cfg["beta"] is None else cfg["beta"],
            gamma=base.gamma if cfg["gamma"] is None else cfg["gamma"],
            eta=base.eta if cfg["eta"] is None else cfg["eta"],
        )
        schedule = LrSchedule(cfg["base-lr"], cfg["warmup-lr"], cfg["warmup-epochs"])
        config = shared.TrainConfig(
            variant=cfg["variant"], shared_channels=cfg["shared-channels"], epochs=cfg["epochs"],
            batch_size=cfg["batch-size"], batches_per_epoch=cfg["batches-per-epoch"], schedule=schedule,
            seed=cfg["seed"], weights=weights, rgb_indices=cfg["rgb-indices"], depth=cfg["depth"],
            base_width=cfg["base-width"],
        )
        config.specs()
        return config

    return _checked(build, "training settings")


def matcher_config(cfg):
    def build():
        m = evaluation.MatcherConfig(cfg["max-keypoints"], cfg["patch-size"], cfg["inlier-threshold"],
                                     cfg["max-iterations"], cfg["seed"])
        if m.max_keypoints < 1 or m.patch_size < 2 or m.inlier_threshold <= 0 or m.max_iterations < 1:
            raise ValueError("matcher settings must be positive")
        if list(cfg["delta-grid"]) != sorted(cfg["delta-grid"]) or min(cfg["delta-grid"]) < 0:
            raise ValueError("delta grid must be ascending and non-negative")
        return m

    return _checked(build, "matcher settings")


# -- dataset directory -----------------------------------------------------------------


def write_stats(path, sar, optical):
    lines = [f"sar.lo={sar.lo!r}", f"sar.hi={sar.hi!r}", f"optical.lo={optical.lo!r}", f"optical.hi={optical.hi!r}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_stats(path):
    vals = dict(line.split("=", 1) for line in Path(path).read_text(encoding="utf-8").split())
    return (NormalizationStats(float(vals["sar.lo"]), float(vals["sar.hi"]), "sar"),
            NormalizationStats(float(vals["optical.lo"]), float(vals["optical.hi"]), "optical"))


def read_manifest(root, name):
    """Rows of ``name`` with paths resolved against the dataset directory."""
    path = Path(root) / name
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines()[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) not in (3, 13):
            raise ValueError(f"{path}:{n}: malformed manifest line")
        rows.append(parts)
    return rows


def load_train_pairs(root):
    return [(load_smt(Path(root) / x), load_smt(Path(root) / y)) for x, y, _ in read_manifest(root, "train.csv")]


def load_eval_pairs(root):
    out = []
    for x, y, seed, xw, *t in read_manifest(root, "eval.csv"):
        base = synthgen.PairSample(load_smt(Path(root) / x), load_smt(Path(root) / y), int(seed))
        out.append(synthgen.WarpedPair(base, load_smt(Path(root) / xw), parse_homography(" ".join(t))))
    return out


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


# -- commands ----------------------------------------------------------------------------


def cmd_gen(cfg):
    spec = scene_spec(cfg)
    if cfg["count"] < 1 or cfg["eval-count"] < 0:
        raise UsageError("count must be >= 1 and eval-count >= 0")
    scale = (cfg["scale-min"], cfg["scale-max"])
    if not 0 < scale[0] <= scale[1] or cfg["max-shift"] < 0 or cfg["max-rotation"] < 0:
        raise UsageError("invalid warp ranges")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "train").mkdir(exist_ok=True)
    (out / "eval").mkdir(exist_ok=True)

    ds = synthgen.gen_dataset(spec, cfg["count"])
    write_stats(out / "stats.txt", ds.sar_stats, ds.optical_stats)
    lines = ["xPath,yPath,seed"]
    for i, p in enumerate(ds.pairs):
        xp, yp = f"train/{i:04d}_x.smt", f"train/{i:04d}_y.smt"
        save_smt(p.x, out / xp)
        save_smt(p.y, out / yp)
        lines.append(f"{xp},{yp},{p.scene_seed}")
    (out / "train.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    pairs = []
    if cfg["eval-count"]:
        pairs = synthgen.gen_eval_pairs(spec, cfg["eval-count"], ds.sar_stats, ds.optical_stats,
                                        cfg["max-shift"], cfg["max-rotation"], scale)
    lines = ["xPath,yPath,seed,warpedXPath,t00,t01,t02,t10,t11,t12,t20,t21,t22"]
    for i, wp in enumerate(pairs):
        xp, yp, wxp = f"eval/{i:04d}_x.smt", f"eval/{i:04d}_y.smt", f"eval/{i:04d}_xw.smt"
        save_smt(wp.base.x, out / xp)
        save_smt(wp.base.y, out / yp)
        save_smt(wp.warped_x, out / wxp)
        t = format_homography(wp.true_T).replace(" ", ",")
        lines.append(f"{xp},{yp},{wp.base.scene_seed},{wxp},{t}")
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(ds.pairs)} training pairs and {len(pairs)} evaluation pairs to {out}")
    return EXIT_OK


def cmd_train(cfg):
    config = train_config(cfg)
    _require(Path(cfg["data"]) / "train.csv", "training manifest")
    data = load_train_pairs(cfg["data"])
    for x, y in data:
        if x.shape[0] != config.kx or y.shape[0] != config.ky:
            raise shared.ConfigurationError(f"dataset channels {x.shape[0]}/{y.shape[0]} do not match the model")
    for target in (cfg["checkpoint"], cfg["trace"]):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
    if cfg["checkpoint-dir"]:
        Path(cfg["checkpoint-dir"]).mkdir(parents=True, exist_ok=True)
    model, trace = shared.train(data, config, checkpoint_dir=cfg["checkpoint-dir"] or None)
    model.save(cfg["checkpoint"])
    shared.write_trace_csv(trace, cfg["trace"])
    print(f"variant={config.variant} epochs={config.epochs} first={trace[0].mean_loss:.6g} "
          f"final={trace[-1].mean_loss:.6g}")
    print(f"checkpoint={cfg['checkpoint']} trace={cfg['trace']}")
    return EXIT_OK


def _load_model(path):
    _require(path, "checkpoint")
    try:
        return shared.SharedModel.load(path)
    except CheckpointError as exc:
        raise shared.ConfigurationError(f"unusable checkpoint {path}: {exc}") from exc


def cmd_transform(cfg):
    root = Path(cfg["data"])
    manifest = "train.csv" if cfg["split"] == "train" else "eval.csv"
    _require(root / manifest, "manifest")
    model = _load_model(cfg["checkpoint"])
    rows = read_manifest(root, manifest)
    pairs = [(load_smt(root / r[0]), load_smt(root / r[1])) for r in rows]
    try:
        xs = [model.run("fx", x) for x, _ in pairs]
        ys = [model.run("fy", y) for _, y in pairs]
    except ValueError as exc:
        raise shared.ConfigurationError(str(exc)) from exc
    if model.has_inverses():
        xs, _ = shared.renormalize(xs)
        ys, _ = shared.renormalize(ys)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    scores = []
    for i, (xt, yt) in enumerate(zip(xs, ys)):
        save_smt(xt, out / f"{i:04d}_xt.smt")
        save_smt(yt, out / f"{i:04d}_yt.smt")
        scores.append(ssim(xt, yt))
    print(f"transformed {len(scores)} pairs into {model.shared_channels} channels; "
          f"mean ssim(xt, yt)={np.mean(scores):.4f} min={np.min(scores):.4f} max={np.max(scores):.4f}")
    return EXIT_OK


def cmd_eval(cfg):
    matcher = matcher_config(cfg)
    root = Path(cfg["data"])
    _require(root / "eval.csv", "evaluation manifest")
    pipeline = cfg["pipeline"]
    if pipeline == "auto":
        pipeline = "both" if cfg["checkpoint"] else "none"
    if pipeline in ("shared", "both") and not cfg["checkpoint"]:
        raise UsageError("the shared pipeline needs --checkpoint")
    model = _load_model(cfg["checkpoint"]) if pipeline != "none" else None
    pairs = load_eval_pairs(root)
    if not pairs:
        raise EmptyEvaluation(f"no evaluation pairs in {root / 'eval.csv'}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    names = ["none", "shared"] if pipeline == "both" else [pipeline]
    reports = []
    for name in names:
        try:
            rep = evaluation.evaluate_dataset(pairs, name, model, matcher, cfg["delta-grid"], cfg["rgb-indices"])
        except ValueError as exc:
            raise shared.ConfigurationError(str(exc)) from exc
        evaluation.write_pairs_csv(rep, out / f"{name}_pairs.csv")
        evaluation.write_sweep_csv(rep, out / f"{name}_sweep.csv")
        evaluation.write_summary(rep, out / f"{name}_summary.txt")
        reports.append(rep)
    print(format_table(reports))
    return EXIT_OK


def format_table(reports):
    head = f"{'pipeline':<9}{'sr':>7}{'ace':>9}{'mma':>7}{'matches':>9}{'ssim':>7}{'rmse':>7}"
    lines = [head]
    for r in reports:
        s = r.similarity
        lines.append(f"{r.pipeline:<9}{r.sr:>7.3f}{r.mean_ace:>9.3f}{r.mean_mma:>7.3f}{r.mean_matches:>9.1f}"
                     f"{s.ssim:>7.3f}{s.rmse:>7.3f}")
    for r in reports:
        sweep = " ".join(f"{d:g}:{c:.3f}" for d, c in zip(r.deltas, r.cmr))
        lines.append(f"cmr[{r.pipeline}] {sweep}")
    return "\n".join(lines)


RUNNERS = {"gen": cmd_gen, "train": cmd_train, "transform": cmd_transform, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg = resolve(args.command, args)
        return RUNNERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except shared.NonFiniteLoss as exc:
        print(f"error: training diverged at epoch {exc.epoch}, batch {exc.batch} "
              f"(dataset sample {exc.sample}): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteGradient as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (shared.ConfigurationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except EmptyEvaluation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
