"""Command-line entry point: gen-data, train, eval, ablate, plot-curve, dump-weights.

Configuration files are flat ``key = value`` text, one setting per line,
``#`` starts a comment. The first setting must be ``schema_version = 1``.
Keys are ``section.field`` with sections ``data`` (scenario generator),
``model``, ``loss``, ``train`` and ``ablate``; module toggles are written
``model.toggles.<name> = on|off``. Unknown keys are errors.

Settings resolve in this order, later ones winning: built-in defaults, the
config file, environment variables, command-line flags. An environment
variable ``DEPTHRISK_<SECTION>__<FIELD>`` (double underscore, case
insensitive) sets ``section.field``, e.g. ``DEPTHRISK_TRAIN__LR=3e-4``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, evalkit, geometry, netcore, scenekit, trainer
from .netcore import ModelConfig
from .objective import LossConfig

log = logging.getLogger("depthrisk")

CONFIG_SCHEMA_VERSION = 1
ENV_PREFIX = "DEPTHRISK_"
TRAIN_FIELDS = ("lr", "batch_size", "epochs", "plateau_patience", "plateau_factor", "seed",
                "evals_per_epoch", "uncertainty_lr")
ABLATE_DEFAULTS = {"families": "toggles", "workers": 1}


class UsageError(Exception):
    """Bad flags, config or inputs; exit code 2."""


# ---------------------------------------------------------------------------
# configuration

def default_config() -> dict:
    model = ModelConfig().to_dict()
    toggles = model.pop("toggles")
    train = {k: v for k, v in asdict(trainer.TrainConfig()).items() if k in TRAIN_FIELDS}
    return {
        "data": asdict(scenekit.ScenarioConfig()),
        "model": model,
        "model.toggles": toggles,
        "loss": asdict(LossConfig()),
        "train": train,
        "ablate": dict(ABLATE_DEFAULTS),
    }


def _coerce(raw, like, key):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        return raw
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if like is None:
            return None if text.lower() in ("", "none", "null") else float(text)
        if isinstance(like, (list, tuple)):
            items = [t for t in text.replace(" ", "").split(",") if t]
            kind = type(like[0]) if like else float
            return [kind(t) for t in items]
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {raw!r} as {type(like).__name__}") from None
    return text


def set_key(cfg: dict, key: str, raw) -> None:
    """Assign ``section.field`` (or ``model.toggles.name``) in a resolved config."""
    if key.startswith("model.toggles."):
        section, name = "model.toggles", key[len("model.toggles."):]
    elif "." in key:
        section, name = key.split(".", 1)
    else:
        raise UsageError(f"config key {key!r} must look like section.field")
    if section not in cfg or name not in cfg[section]:
        raise UsageError(f"unknown config key {key!r}")
    cfg[section][name] = _coerce(raw, cfg[section][name], key)


def parse_config_text(text: str, source: str = "<config>") -> list:
    """(key, raw value) pairs of a flat config file; checks the schema version."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        pairs.append((key, value))
    versions = [v for k, v in pairs if k == "schema_version"]
    if not versions:
        raise UsageError(f"{source}: missing schema_version")
    if versions[0] != str(CONFIG_SCHEMA_VERSION):
        raise UsageError(f"{source}: schema_version {versions[0]} is not supported "
                         f"(expected {CONFIG_SCHEMA_VERSION})")
    return [(k, v) for k, v in pairs if k != "schema_version"]


def load_config(path=None, env=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        text = path.read_text()
        if path.suffix == ".json":
            # a run manifest: replay its resolved settings
            try:
                manifest = json.loads(text)
                pairs = list(flatten_config(manifest["config"]).items())
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise UsageError(f"{path}: not a run manifest ({exc})") from None
        else:
            pairs = parse_config_text(text, str(path))
        for key, value in pairs:
            set_key(cfg, key, value)
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, field_ = name[len(ENV_PREFIX):].lower().split("__", 1)
            set_key(cfg, f"{section.replace('__', '.')}.{field_}", value)
    for key, value in overrides:
        set_key(cfg, key, value)
    return cfg


def flatten_config(cfg: dict) -> dict:
    out = {}
    for section, values in cfg.items():
        for name, value in values.items():
            out[f"{section}.{name}"] = value
    return out


def render_config(cfg: dict) -> str:
    lines = [f"schema_version = {CONFIG_SCHEMA_VERSION}"]
    for key, value in flatten_config(cfg).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def bind_dataset(cfg: dict, manifest: dict) -> None:
    """Adopt the dataset's feature dim unless the config set a different one explicitly."""
    D = manifest["D"]
    if cfg["model"]["feature_dim"] != D:
        if cfg["model"]["feature_dim"] != ModelConfig().feature_dim:
            raise UsageError(f"model.feature_dim = {cfg['model']['feature_dim']} but the dataset has D = {D}")
        cfg["model"]["feature_dim"] = D


def build_train_config(cfg: dict, frame_rate: float) -> trainer.TrainConfig:
    model = dict(cfg["model"])
    model["toggles"] = dict(cfg["model.toggles"])
    try:
        mcfg = ModelConfig.from_dict(model)
        lcfg = LossConfig(**cfg["loss"])
        return trainer.TrainConfig(model=mcfg, loss=lcfg, frame_rate=frame_rate, **cfg["train"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# run manifest

def write_manifest(out: Path, command: str, args, cfg: dict, seed, artifacts: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": [a for a in (args.argv or [])],
        "config": cfg,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    log.info("%s: run manifest %s", command, path)
    return path


def _overrides(args) -> list:
    pairs = []
    if getattr(args, "seed", None) is not None:
        pairs += [("data.seed", str(args.seed)), ("train.seed", str(args.seed))]
    if getattr(args, "mode", None):
        pairs.append(("model.graph_mode", args.mode))
    for item in getattr(args, "toggle", None) or []:
        if "=" not in item:
            raise UsageError(f"--toggle expects name=on|off, got {item!r}")
        name, state = item.split("=", 1)
        if name not in netcore.TOGGLES:
            raise UsageError(f"unknown module toggle {name!r}; known: {', '.join(netcore.TOGGLES)}")
        pairs.append((f"model.toggles.{name}", state))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs.append(tuple(p.strip() for p in item.split("=", 1)))
    return pairs


def _resolve(args) -> dict:
    return load_config(args.config, overrides=_overrides(args))


def _read_manifest(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"dataset directory {directory} does not exist")
    return scenekit.read_manifest(directory)


def _load_data(directory):
    return _read_manifest(directory), scenekit.load_dataset(directory)


def _select_split(samples, directory, split: str):
    if split == "all":
        return samples
    splits = scenekit.load_splits(directory)
    if split not in splits:
        raise UsageError(f"unknown split {split!r}; available: {', '.join(sorted(splits))} or all")
    by_id = {s.sample_id: s for s in samples}
    return [by_id[i] for i in splits[split]]


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    write_manifest(out, "gen-data", args, cfg, cfg["data"]["seed"], {"dataset": out})
    try:
        scenario = scenekit.ScenarioConfig(**cfg["data"])
        scenario.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    samples = scenekit.generate_dataset(scenario)
    splits = scenekit.make_splits(samples, seed=scenario.seed)
    scenekit.save_dataset(samples, out, splits=splits, frame_rate=scenario.frame_rate, config=scenario)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    manifest = _read_manifest(args.dataset)
    bind_dataset(cfg, manifest)
    tcfg = build_train_config(cfg, float(manifest.get("frame_rate", 20.0)))
    write_manifest(out, "train", args, cfg, cfg["train"]["seed"],
                   {"log": out / "train_log.jsonl", "best": out / "best.ckpt", "final": out / "final.ckpt"})
    _, samples = _load_data(args.dataset)
    splits = scenekit.load_splits(args.dataset)
    res = trainer.train(samples, tcfg, splits, out_dir=out)
    summary = {"best": res.best, "final": res.history[-1] if res.history else {},
               "checksum": res.checksum}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if res.best:
        print(f"best AP {res.best['ap']:.4f} mTTA {res.best['mtta']:.3f}s; parameters {res.checksum[:16]}")
    return 0


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return trainer.load_model(path)
    except netcore.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    out = Path(args.out)
    cfg = _resolve(args)
    write_manifest(out, "eval", args, cfg, None,
                   {"report": out / "report.json", "thresholds": out / "thresholds.csv"})
    model, _, header = _load_checkpoint(args.checkpoint)
    manifest, samples = _load_data(args.dataset)
    if manifest["D"] != model.cfg.feature_dim:
        raise UsageError(f"checkpoint expects feature dim {model.cfg.feature_dim}, dataset has {manifest['D']}")
    chosen = _select_split(samples, args.dataset, args.split)
    rate = float(manifest.get("frame_rate", header["train_config"].get("frame_rate", 20.0)))
    try:
        report = trainer.evaluate_model(model, chosen, rate)
    except evalkit.MetricError as exc:
        raise UsageError(str(exc)) from None
    (out / "report.json").write_text(report.to_json())
    (out / "thresholds.csv").write_text(report.threshold_csv())
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    families = [f for f in str(cfg["ablate"]["families"]).replace(" ", "").split(",") if f]
    unknown = [f for f in families if f not in trainer.GRID_BUILDERS]
    if unknown:
        raise UsageError(f"unknown ablation families {unknown}; known: {', '.join(trainer.GRID_BUILDERS)}")
    manifest = _read_manifest(args.dataset)
    bind_dataset(cfg, manifest)
    base = build_train_config(cfg, float(manifest.get("frame_rate", 20.0)))
    write_manifest(out, "ablate", args, cfg, cfg["train"]["seed"],
                   {f: out / f"ablation_{f}.csv" for f in families})
    _, samples = _load_data(args.dataset)
    splits = scenekit.load_splits(args.dataset)
    for family in families:
        grid = trainer.GRID_BUILDERS[family](base)
        result = trainer.run_ablation(grid, samples, splits, workers=int(cfg["ablate"]["workers"]))
        csv_path, _ = trainer.write_tables(result, out)
        failed = sum("error" in r for r in result["rows"])
        print(f"{family}: {len(result['rows'])} experiments, {failed} failed -> {csv_path}")
    return 0


def _ids(args, samples):
    wanted = [i for i in args.ids.split(",") if i]
    if not wanted:
        raise UsageError("--ids needs at least one sample id")
    by_id = {s.sample_id: s for s in samples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise UsageError(f"unknown sample id(s): {', '.join(missing)}")
    return [by_id[i] for i in wanted]


def cmd_plot_curve(args) -> int:
    out = Path(args.out)
    cfg = _resolve(args)
    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    model, _, _ = _load_checkpoint(args.checkpoint)
    _, samples = _load_data(args.dataset)
    chosen = _ids(args, samples)
    paths = {s.sample_id: out / f"curve_{s.sample_id}.{args.format}" for s in chosen}
    write_manifest(out, "plot-curve", args, cfg, None, paths)
    for s in chosen:
        curve = netcore.forward(s, model)
        plot_curve(curve.scores, s, args.threshold, paths[s.sample_id])
        print(f"wrote {paths[s.sample_id]}")
    return 0


def plot_curve(scores, sample, threshold: float, path: Path) -> None:
    """Per-frame risk with the decision threshold and, for positives, the accident frame."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "depthrisk", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3))
        frames = np.arange(1, len(scores) + 1)
        ax.plot(frames, scores, color="tab:red", lw=1.5, label="risk score")
        ax.axhline(threshold, color="0.3", ls="--", lw=1, label=f"threshold {threshold:g}")
        if sample.label:
            ax.axvline(sample.accident_frame, color="tab:blue", ls=":", lw=1.5,
                       label=f"accident frame {sample.accident_frame}")
        ax.set_xlim(1, len(scores))
        ax.set_ylim(0, 1)
        ax.set_xlabel("frame")
        ax.set_ylabel("accident probability")
        ax.set_title(sample.sample_id)
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        meta = {"Date": None} if path.suffix == ".svg" else {}
        fig.savefig(path, metadata=meta)
        plt.close(fig)


def cmd_dump_weights(args) -> int:
    out = Path(args.out)
    cfg = _resolve(args)
    _, samples = _load_data(args.dataset)
    chosen = _ids(args, samples)
    mode = args.mode or cfg["model"]["graph_mode"]
    edge = ModelConfig(feature_dim=8, context_dim=8, heads=1, alpha_d=cfg["model"]["alpha_d"],
                       alpha_m=cfg["model"]["alpha_m"],
                       coordinate_scaling=cfg["model"]["coordinate_scaling"],
                       squared_distance=cfg["model"]["squared_distance"]).edge_config
    paths = {s.sample_id: out / f"weights_{s.sample_id}_{mode}.csv" for s in chosen}
    write_manifest(out, "dump-weights", args, cfg, None, paths)
    for s in chosen:
        try:
            W = geometry.video_weights(s, mode, edge)
        except geometry.DepthMissingError as exc:
            raise UsageError(f"{s.sample_id}: {exc}") from None
        with open(paths[s.sample_id], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "i", "j", "weight"])
            for t, i, j in zip(*np.nonzero(W)):
                w.writerow([t + 1, i, j, f"{W[t, i, j]:.12g}"])
        print(f"wrote {paths[s.sample_id]}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthrisk", description=__doc__.split("\n")[0],
                                epilog="Config keys can also come from DEPTHRISK_<SECTION>__<FIELD> variables.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, seed=False):
        sp.add_argument("--config", help="flat key=value config file (or a run_manifest.json to replay)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset directory")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed (data and training)")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, dataset=False, seed=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp, seed=True)
    sp.add_argument("--mode", choices=geometry.MODES, help="collision graph geometry")
    sp.add_argument("--toggle", action="append", metavar="NAME=on|off", help="switch a model module")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", help="train, test or all (default test)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run ablation grids (ablate.families)")
    common(sp, seed=True)
    sp.add_argument("--mode", choices=geometry.MODES)
    sp.add_argument("--toggle", action="append", metavar="NAME=on|off")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot-curve", help="plot per-frame risk curves")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ids", required=True, help="comma-separated sample ids")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--format", choices=("svg", "png"), default="svg")
    sp.set_defaults(func=cmd_plot_curve)

    sp = sub.add_parser("dump-weights", help="write per-frame collision graph weights as CSV")
    common(sp)
    sp.add_argument("--ids", required=True, help="comma-separated sample ids")
    sp.add_argument("--mode", choices=geometry.MODES)
    sp.set_defaults(func=cmd_dump_weights)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, scenekit.DatasetError, geometry.GeometryError, netcore.ShapeError,
            netcore.SmoothError) as exc:
        print(f"depthrisk {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a bug or an environment failure
        print(f"depthrisk {args.command}: internal error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
