"""Training loop, evaluation, checkpoints and the ablation harness."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import evalkit, netcore, objective
from .netcore import ModelConfig, RiskModel
from .objective import LossConfig, UncertaintyParams

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    seed: int = 0
    evals_per_epoch: int = 2
    frame_rate: float = 20.0
    uncertainty_lr: Optional[float] = None  # defaults to lr
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.evals_per_epoch < 1:
            raise ValueError("batch_size, epochs and evals_per_epoch must be at least 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(model=model, loss=loss, **d)


@dataclass
class TrainResult:
    model: RiskModel
    uncertainty: UncertaintyParams
    history: list  # one dict per evaluation
    best: dict  # evaluation record of the best checkpoint
    checksum: str  # sha256 of the final parameters
    best_checkpoint: Optional[Path] = None
    final_checkpoint: Optional[Path] = None


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


class _Split:
    """Pre-collated tensors of one split."""

    def __init__(self, samples, cfg: ModelConfig):
        self.samples = list(samples)
        self.batch = netcore.collate(self.samples, cfg) if self.samples else None

    def __len__(self):
        return len(self.samples)

    def take(self, idx):
        return {k: v[idx] for k, v in self.batch.items()}


def split_samples(samples, splits: Optional[dict]):
    if splits is None:
        from .scenekit import make_splits
        splits = make_splits(samples)
    by_id = {s.sample_id: s for s in samples}
    missing = [i for part in ("train", "test") for i in splits.get(part, []) if i not in by_id]
    if missing:
        raise KeyError(f"split lists unknown sample ids: {missing[:5]}")
    return [by_id[i] for i in splits["train"]], [by_id[i] for i in splits["test"]]


def _better(a: dict, b: Optional[dict]) -> bool:
    if b is None:
        return True
    return (a["ap"], a["mtta"]) > (b["ap"], b["mtta"])


def train(samples, config: TrainConfig, splits: Optional[dict] = None, out_dir=None,
          on_record: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a model on the train split, evaluating on the test split.

    Evaluates ``evals_per_epoch`` times per epoch, reduces the learning rate
    when test AP plateaus, keeps the best (AP, then mTTA) state. With
    ``out_dir`` the step/eval records go to ``train_log.jsonl`` and the best
    and final states to ``best.ckpt`` / ``final.ckpt``.
    """
    train_s, test_s = split_samples(samples, splits)
    if not train_s:
        raise ValueError("empty training split")
    seed_everything(config.seed)
    mcfg = config.model
    model = RiskModel(mcfg)
    unc = UncertaintyParams()
    groups = [{"params": list(model.parameters()), "lr": config.lr}]
    if config.loss.adaptive:
        groups.append({"params": list(unc.parameters()), "lr": config.uncertainty_lr or config.lr})
    opt = torch.optim.Adam(groups)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=config.plateau_factor, patience=config.plateau_patience)

    tr = _Split(train_s, mcfg)
    te = _Split(test_s, mcfg)
    order_rng = np.random.default_rng(config.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    def emit(rec):
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if on_record is not None:
            on_record(rec)

    history, best, best_state = [], None, None
    step = 0
    n_batches = math.ceil(len(tr) / config.batch_size)
    eval_after = {int(round(n_batches * (k + 1) / config.evals_per_epoch)) for k in range(config.evals_per_epoch)}
    try:
        for epoch in range(config.epochs):
            perm = order_rng.permutation(len(tr))
            for b in range(n_batches):
                idx = torch.as_tensor(perm[b * config.batch_size:(b + 1) * config.batch_size])
                batch = tr.take(idx)
                model.train()
                scores, video = model(batch["context"], batch["objects"], batch["mask"], batch["weights"])
                loss, parts = objective.total_loss(scores, video, batch["labels"], batch["taus"],
                                                   unc, config.loss)
                if not torch.isfinite(loss):
                    bad = [tr.samples[i].sample_id for i in idx.tolist()]
                    dump = {"step": step, "epoch": epoch, "sample_ids": bad, **parts.record()}
                    if out is not None:
                        (out / "diverged_batch.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingDiverged(f"non-finite loss at step {step}: {dump}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                emit({"kind": "step", "step": step, "epoch": epoch,
                      "lr": opt.param_groups[0]["lr"], **parts.record()})

                if (b + 1) in eval_after and len(te):
                    report = evaluate_model(model, te.samples, config.frame_rate, batch=te.batch)
                    rec = {"kind": "eval", "step": step, "epoch": epoch + (b + 1) / n_batches,
                           "ap": report.ap, "auc": report.auc, "mtta": report.mtta,
                           "tta_r80": report.tta_r80, "tta_r50": report.tta_r50,
                           "lr": opt.param_groups[0]["lr"],
                           "sigma1": float(unc.sigma1.detach()), "sigma2": float(unc.sigma2.detach())}
                    history.append(rec)
                    emit(rec)
                    log.info("epoch %.1f  AP %.4f  mTTA %.3fs  lr %.3g", rec["epoch"], rec["ap"], rec["mtta"],
                             rec["lr"])
                    sched.step(report.ap)
                    if _better(rec, best):
                        best = rec
                        best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(unc.state_dict()))
    finally:
        if log_fh is not None:
            log_fh.close()

    checksum = netcore.parameter_checksum(model)
    result = TrainResult(model, unc, history, best or {}, checksum)
    if out is not None:
        result.final_checkpoint = out / "final.ckpt"
        save_model(result.final_checkpoint, model, unc, config, meta={"step": step})
        if best_state is not None:
            bm, bu = RiskModel(mcfg), UncertaintyParams()
            bm.load_state_dict(best_state[0])
            bu.load_state_dict(best_state[1])
            result.best_checkpoint = out / "best.ckpt"
            save_model(result.best_checkpoint, bm, bu, config, meta={"best": best})
    return result


def predict(model: RiskModel, samples, batch=None, batch_size: int = 64):
    """Per-frame scores (V, T) and video probabilities (V,) in evaluation mode."""
    model.eval()
    if batch is None:
        batch = netcore.collate(samples, model.cfg, dtype=next(model.parameters()).dtype)
    out_s, out_v = [], []
    with torch.no_grad():
        for i in range(0, batch["context"].shape[0], batch_size):
            sl = slice(i, i + batch_size)
            s, v = model(batch["context"][sl], batch["objects"][sl], batch["mask"][sl], batch["weights"][sl])
            out_s.append(s)
            out_v.append(v)
    return torch.cat(out_s).double().numpy(), torch.cat(out_v).double().numpy()


def evaluate_model(model: RiskModel, samples, frame_rate: float = 20.0, batch=None) -> evalkit.EvalReport:
    scores, _ = predict(model, samples, batch=batch)
    labels = np.array([s.label for s in samples])
    taus = np.array([s.accident_frame for s in samples])
    return evalkit.evaluate_curves(scores, labels, taus, frame_rate)


def evaluate(checkpoint, samples, frame_rate: Optional[float] = None) -> evalkit.EvalReport:
    """Report of a saved checkpoint on ``samples`` (dropout off, deterministic)."""
    model, _, header = load_model(checkpoint)
    first = samples[0]
    if first.feature_dim != model.cfg.feature_dim:
        raise netcore.ShapeError(f"checkpoint expects feature dim {model.cfg.feature_dim}, "
                                 f"dataset has {first.feature_dim}")
    if frame_rate is None:
        frame_rate = header.get("train_config", {}).get("frame_rate", 20.0)
    return evaluate_model(model, samples, frame_rate)


def save_model(path, model: RiskModel, unc: UncertaintyParams, config: TrainConfig, meta=None) -> str:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"uncertainty.{k}": v for k, v in unc.state_dict().items()})
    header = {"model_config": model.cfg.to_dict(), "train_config": config.to_dict(),
              "meta": meta or {}}
    return netcore.save_checkpoint(path, tensors, header)


def load_model(path):
    """Returns (model, uncertainty params, header)."""
    header, arrays = netcore.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = RiskModel(cfg)
    unc = UncertaintyParams()
    model.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")})
    unc.load_state_dict({k[12:]: torch.from_numpy(v) for k, v in arrays.items()
                         if k.startswith("uncertainty.")})
    model.eval()
    return model, unc, header


# ---------------------------------------------------------------------------
# ablation grids

@dataclass
class Experiment:
    name: str
    config: TrainConfig
    meta: dict = field(default_factory=dict)


@dataclass
class AblationGrid:
    family: str
    experiments: list


_TOGGLE_ROWS = [("A", "context_attn"), ("B", "object_attn"), ("C", "collision_3d"),
                ("D", "temporal_attn"), ("E", "smooth"), ("F", "accident_head"), ("original", None)]
_TOGGLE_COLUMNS = {"context_attn": "IA", "object_attn": "OA", "collision_3d": "3D-CM",
                   "temporal_attn": "TA", "smooth": "SM", "accident_head": "AM"}

SMOOTH_SETS = [(50,), (20,), (10,), (5,), (2,), (50, 20), (20, 10), (10, 5), (5, 2),
               (50, 20, 10), (20, 10, 5), (10, 5, 2), (50, 20, 10, 5), (20, 10, 5, 2)]
LOSS_FACTOR_SETS = [(None, 10), (None, 50), (None, 100), (None, 150), (None, 200),
                    (1, None), (5, None), (10, None), (20, None), (50, None),
                    (10, 100), (20, 100), (50, 100), (10, 150), (20, 150), (50, 150),
                    (10, 200), (20, 200), (50, 200)]
BETAS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


def _with_model(base: TrainConfig, **changes) -> TrainConfig:
    mc = replace(base.model, **changes)
    return replace(base, model=mc)


def toggle_grid(base: TrainConfig) -> AblationGrid:
    exps = []
    for label, off in _TOGGLE_ROWS:
        toggles = {k: k != off for k in netcore.TOGGLES}
        meta = {"Model": label, **{_TOGGLE_COLUMNS[k]: toggles[k] for k in netcore.TOGGLES}}
        exps.append(Experiment(label, _with_model(base, toggles=toggles), meta))
    return AblationGrid("toggles", exps)


def smooth_grid(base: TrainConfig, sets=SMOOTH_SETS) -> AblationGrid:
    exps = [Experiment(str(i + 1), _with_model(base, smooth_fields=tuple(s)),
                       {"Experiment": i + 1, "fields": "/".join(map(str, s))})
            for i, s in enumerate(sets)]
    return AblationGrid("smooth", exps)


def loss_factor_grid(base: TrainConfig, sets=LOSS_FACTOR_SETS) -> AblationGrid:
    exps = []
    for i, (f1, f2) in enumerate(sets):
        loss = replace(base.loss, f1=f1 or base.loss.f1, f2=f2 or base.loss.f2,
                       use_lambda1=f1 is not None, use_lambda2=f2 is not None)
        exps.append(Experiment(str(i + 1), replace(base, loss=loss),
                               {"Experiment": i + 1, "f1": f1 if f1 else "-", "f2": f2 if f2 else "-"}))
    return AblationGrid("loss_factors", exps)


def adaptive_grid(base: TrainConfig, betas=BETAS) -> AblationGrid:
    exps = []
    for adaptive in (False, True):
        for beta in betas:
            loss = replace(base.loss, gamma=beta, adaptive=adaptive)
            exps.append(Experiment(f"{'on' if adaptive else 'off'}-{beta:g}", replace(base, loss=loss),
                                   {"adaptive": adaptive, "beta": beta}))
    return AblationGrid("adaptive", exps)


def collision_mode_grid(base: TrainConfig) -> AblationGrid:
    return AblationGrid("collision_mode", [
        Experiment(mode, _with_model(base, graph_mode=mode), {"mode": mode}) for mode in ("2d", "3d")])


GRID_BUILDERS = {"toggles": toggle_grid, "smooth": smooth_grid, "loss_factors": loss_factor_grid,
                 "adaptive": adaptive_grid, "collision_mode": collision_mode_grid}


def _run_one(args):
    exp, samples, splits = args
    try:
        res = train(samples, exp.config, splits)
    except Exception as exc:  # recorded, the grid goes on
        return {"name": exp.name, **exp.meta, "error": f"{type(exc).__name__}: {exc}"}
    final = res.history[-1] if res.history else {}
    return {
        "name": exp.name, **exp.meta,
        "ap": final.get("ap"), "mtta": final.get("mtta"), "tta_r80": final.get("tta_r80"),
        "best_ap": res.best.get("ap"), "best_mtta": res.best.get("mtta"),
        "scatter": [[h["epoch"], h["ap"], h["mtta"]] for h in res.history],
        "checksum": res.checksum,
    }


def run_ablation(grid: AblationGrid, samples, splits=None, workers: int = 1) -> dict:
    """Train every experiment of ``grid`` and tabulate (AP, mTTA, TTA@R80).

    Returns ``{"family", "rows", "summary"}``; ``rows`` has one entry per
    experiment (failed ones carry an ``error`` field), ``summary`` holds the
    family-specific aggregate rows.
    """
    jobs = [(e, samples, splits) for e in grid.experiments]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    return {"family": grid.family, "rows": rows, "summary": summarize(grid.family, rows)}


def summarize(family: str, rows: list) -> list:
    ok = [r for r in rows if "error" not in r]
    out = []
    if family == "adaptive":
        for adaptive in (False, True):
            sel = [r for r in ok if r["adaptive"] == adaptive]
            if not sel:
                continue
            ap = np.array([r["ap"] for r in sel])
            mt = np.array([r["mtta"] for r in sel])
            out.append({"name": "Average", "adaptive": adaptive, "ap": float(ap.mean()), "mtta": float(mt.mean())})
            out.append({"name": "Variance", "adaptive": adaptive, "ap": float(ap.var()), "mtta": float(mt.var())})
    elif family == "collision_mode":
        for r in ok:
            aps = np.array([p[1] for p in r["scatter"]])
            out.append({"name": r["mode"], "points": len(aps), "best_ap": float(aps.max()),
                        "ap_mean": float(aps.mean()), "ap_variance": float(aps.var())})
    return out


def write_tables(result: dict, out_dir) -> tuple:
    """CSV + JSON of an ablation result; returns the two paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"ablation_{result['family']}.json"
    jpath.write_text(json.dumps(result, indent=2, sort_keys=True))
    cpath = out / f"ablation_{result['family']}.csv"
    rows = [{k: v for k, v in r.items() if k not in ("scatter",)} for r in result["rows"]]
    rows += [{"summary": True, **r} for r in result["summary"]]
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return cpath, jpath
