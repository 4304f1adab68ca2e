"""Experiment driver behind the command-line interface."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import eeg_data as D
from . import genotype as G
from .config import ConfigError, build_space, constraint_config, save_config, search_config
from .constrained import TrajectoryLog, read_trajectory, run_search
from .core import checkpoint
from .core import functional as F
from .core.optim import SGD, cosine_lr
from .core.tensor import Tensor, no_grad
from .metrics import accuracy, cohen_kappa
from .supernet import MetaNet
from .svg import bar_chart, line_chart

log = logging.getLogger("ctnas")


def _log_epoch(kind):
    def emit(stats):
        log.info("%s epoch %s %s", kind, stats["epoch"],
                 " ".join(f"{k}={v:.4g}" for k, v in stats.items() if k != "epoch" and isinstance(v, float)))
    return emit


@dataclass
class PreparedData:
    train: D.TrialSet
    holdout: D.TrialSet
    train_x: np.ndarray
    holdout_x: np.ndarray
    input_shape: Tuple[int, int]


@dataclass
class RunReport:
    command: str
    seed: int
    genotype_path: Optional[str] = None
    trajectory_path: Optional[str] = None
    best_accuracy: Optional[float] = None
    final_accuracy: Optional[float] = None
    kappa: Optional[float] = None
    param_count: Optional[int] = None
    mac_count: Optional[int] = None
    wall_time_s: float = 0.0
    selection_counts: Dict[str, int] = field(default_factory=dict)
    unconstrained: Optional[bool] = None
    epochs_run: Optional[int] = None
    converged_at: Optional[int] = None

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ------------------------------------------------------------------------ data

def load_trials(cfg: dict) -> D.TrialSet:
    d = cfg["data"]
    if d["source"] == "synth":
        s = d["synth"]
        seed = cfg["seed"] if s.get("seed") is None else s["seed"]
        return D.synth_generate(classes=s["classes"], channels=s["channels"], points=s["points"],
                                rate=d["sample_rate_hz"], trials_per_class=s["trials_per_class"],
                                snr_db=s["snr_db"], seed=seed, n_subjects=s["n_subjects"])
    try:
        trials = D.ingest(d["source"], d["format"], d["sample_rate_hz"], cfg["arch"]["classes"])
    except D.DataError as exc:
        raise ConfigError(f"data: {exc}") from None
    if trials.n_channels != cfg["arch"]["channels"]:
        raise ConfigError(f"data has {trials.n_channels} channels but arch.channels is {cfg['arch']['channels']}")
    return trials


def prepare(cfg: dict) -> PreparedData:
    d = cfg["data"]
    trials = D.resample(load_trials(cfg), d["target_hz"])
    if trials.n_points < d["window"]:
        raise ConfigError(f"trials have {trials.n_points} points, fewer than data.window={d['window']}")
    try:
        train, holdout = D.split(trials, d["split"], cfg["seed"], d["holdout_ratio"], d["subject"])
    except D.DataError as exc:
        raise ConfigError(f"data: {exc}") from None
    train, holdout = D.normalize(train, holdout)
    tx = D.slice_stack(train, d["window"], d["stride"]).tensor.astype(np.float32)
    hx = D.slice_stack(holdout, d["window"], d["stride"]).tensor.astype(np.float32)
    return PreparedData(train, holdout, tx, hx, tuple(tx.shape[2:]))


def search_halves(prep: PreparedData, cfg: dict):
    """Stratified halves of the training split (optionally a fraction of it)."""
    idx = np.arange(len(prep.train))
    frac = cfg["data"]["search_fraction"]
    if frac < 1:
        idx, _ = D.split_indices(prep.train, "mixed", cfg["seed"] + 17, 1 - frac)
    sub = prep.train.subset(idx)
    a, b = D.split_indices(sub, "mixed", cfg["seed"] + 1, 0.5)
    ia, ib = idx[a], idx[b]
    return (prep.train_x[ia], prep.train.labels[ia]), (prep.train_x[ib], prep.train.labels[ib])


# ---------------------------------------------------------------------- search

def _write_epochs(path: str, stats: List[dict]) -> None:
    cols = ["epoch", "L_train", "L_val", "L_lag", "val_acc", "omega_raw", "phi", "phi_mean", "skip_floor"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in stats:
            w.writerow([s[c] if isinstance(s[c], int) else f"{s[c]:.9g}" for c in cols])


def build_metanet(cfg: dict, input_shape) -> MetaNet:
    a = cfg["arch"]
    return MetaNet(build_space(cfg), a["channels"], a["classes"], a["n_pairs"], a["n_nodes"], input_shape,
                   seed=cfg["seed"], activation=a["activation"])


def cmd_search(cfg: dict, stop_epoch: Optional[int] = None, prep: Optional[PreparedData] = None) -> RunReport:
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.json"))
    start = time.time()
    prep = prep or prepare(cfg)
    train, val = search_halves(prep, cfg)
    net = build_metanet(cfg, prep.input_shape)
    cc = constraint_config(cfg)
    scfg = search_config(cfg)
    traj_path = os.path.join(out, "trajectory.csv")
    traj = TrajectoryLog(traj_path)
    try:
        result = run_search(net, train, val, scfg, cc, trajectory=traj, stop_epoch=stop_epoch,
                            on_epoch=_log_epoch("search"))
    finally:
        traj.close()
    geno = result.genotype
    geno_path = os.path.join(out, "genotype.json")
    with open(geno_path, "wb") as fh:
        fh.write(G.serialize(geno))
    checkpoint.save(os.path.join(out, "theta.ckpt"),
                    {"normal": result.theta.normal.data, "reduce": result.theta.reduce.data})
    _write_epochs(os.path.join(out, "epochs.csv"), result.epoch_stats)
    compiled = G.compile_genotype(geno, input_shape=prep.input_shape, activation=cfg["arch"]["activation"])
    accs = [s["val_acc"] for s in result.epoch_stats]
    report = RunReport(
        command="search", seed=cfg["seed"], genotype_path=geno_path, trajectory_path=traj_path,
        best_accuracy=max(accs) if accs else None, final_accuracy=accs[-1] if accs else None,
        param_count=G.count_params(compiled), mac_count=G.count_macs(compiled, prep.input_shape),
        wall_time_s=time.time() - start, selection_counts=G.selection_counts(geno),
        unconstrained=cc.unconstrained, epochs_run=len(result.epoch_stats), converged_at=result.converged_at)
    report.write(os.path.join(out, "report.json"))
    return report


# --------------------------------------------------------------------- retrain

def predict(net, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(net(Tensor(x[i:i + batch_size])).data.argmax(axis=1))
    finally:
        net.train(was)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_network(net, train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray], rcfg: dict,
                  seed: int, classes: int, on_epoch=None) -> List[dict]:
    from .constrained import iterate_batches

    x, y = train
    vx, vy = val
    params = net.parameters()
    opt = SGD(params, lr=rcfg["lr"], momentum=rcfg["momentum"], weight_decay=rcfg["weight_decay"],
              grad_clip=rcfg["grad_clip"])
    rng = np.random.default_rng(seed + 2)
    steps = len(iterate_batches(len(x), rcfg["batch_size"], np.random.default_rng(0)))
    total = rcfg["epochs"] * steps
    history = []
    step = 0
    for epoch in range(rcfg["epochs"]):
        net.train()
        losses = []
        for idx in iterate_batches(len(x), rcfg["batch_size"], rng):
            opt.lr = cosine_lr(step, total, rcfg["lr"], rcfg["lr_min"])
            opt.zero_grad()
            loss = F.cross_entropy(net(Tensor(x[idx])), y[idx])
            lv = float(loss.data)
            if not math.isfinite(lv):
                from .supernet import DivergenceError
                raise DivergenceError(f"training loss became {lv} at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(lv)
            step += 1
        pred = predict(net, vx)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_acc": accuracy(vy, pred),
               "val_kappa": cohen_kappa(vy, pred, classes)}
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def load_genotype(path: str) -> G.Genotype:
    try:
        with open(path, "rb") as fh:
            return G.parse(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"genotype file not found: {path}") from None
    except G.GenotypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_genotype(cfg, geno):
    a = cfg["arch"]
    if geno.channels != a["channels"] or geno.classes != a["classes"]:
        raise ConfigError(f"genotype is for {geno.channels} channels / {geno.classes} classes, config has "
                          f"{a['channels']} / {a['classes']}")


def cmd_retrain(cfg: dict, genotype_path: str, prep: Optional[PreparedData] = None) -> RunReport:
    geno = load_genotype(genotype_path)
    _check_genotype(cfg, geno)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.json"))
    start = time.time()
    prep = prep or prepare(cfg)
    net = G.compile_genotype(geno, input_shape=prep.input_shape, seed=cfg["seed"], activation=cfg["arch"]["activation"])
    history = train_network(net, (prep.train_x, prep.train.labels), (prep.holdout_x, prep.holdout.labels),
                            cfg["retrain"], cfg["seed"], cfg["arch"]["classes"], on_epoch=_log_epoch("retrain"))
    checkpoint.save(os.path.join(out, "weights.ckpt"), net.state_dict())
    with open(os.path.join(out, "retrain_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_acc", "val_kappa"])
        for h in history:
            w.writerow([h["epoch"], f"{h['train_loss']:.9g}", f"{h['val_acc']:.9g}", f"{h['val_kappa']:.9g}"])
    accs = [h["val_acc"] for h in history]
    report = RunReport(
        command="retrain", seed=cfg["seed"], genotype_path=os.path.abspath(genotype_path),
        best_accuracy=max(accs) if accs else None, final_accuracy=accs[-1] if accs else None,
        kappa=history[-1]["val_kappa"] if history else None, param_count=G.count_params(net),
        mac_count=G.count_macs(net, prep.input_shape), wall_time_s=time.time() - start,
        selection_counts=G.selection_counts(geno), epochs_run=len(history))
    report.write(os.path.join(out, "report.json"))
    return report


def cmd_eval(cfg: dict, genotype_path: str, weights_path: str, prep: Optional[PreparedData] = None) -> RunReport:
    geno = load_genotype(genotype_path)
    _check_genotype(cfg, geno)
    prep = prep or prepare(cfg)
    net = G.compile_genotype(geno, input_shape=prep.input_shape, activation=cfg["arch"]["activation"])
    try:
        net.load_state_dict(checkpoint.load(weights_path))
    except (OSError, checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise ConfigError(f"{weights_path}: {exc}") from None
    pred = predict(net, prep.holdout_x)
    acc = accuracy(prep.holdout.labels, pred)
    return RunReport(command="eval", seed=cfg["seed"], genotype_path=os.path.abspath(genotype_path),
                     best_accuracy=acc, final_accuracy=acc,
                     kappa=cohen_kappa(prep.holdout.labels, pred, cfg["arch"]["classes"]),
                     param_count=G.count_params(net), mac_count=G.count_macs(net, prep.input_shape),
                     selection_counts=G.selection_counts(geno))


# ----------------------------------------------------------------------- stats

def _read_epoch_accuracy(run_dir: str) -> Dict[int, float]:
    path = os.path.join(run_dir, "epochs.csv")
    if not os.path.exists(path):
        raise ConfigError(f"{run_dir}: missing epochs.csv")
    with open(path, newline="") as fh:
        return {int(r["epoch"]): float(r["val_acc"]) for r in csv.DictReader(fh)}


def epoch_argmax(rows: Sequence[dict]) -> Dict[Tuple[int, str, int], str]:
    """Winning non-``none`` operator per (epoch, cell type, edge); earlier rows win ties."""
    best: Dict[Tuple[int, str, int], Tuple[float, str]] = {}
    for r in rows:
        if r["operator_name"] == "none":
            continue
        key = (int(r["epoch"]), r["cell_type"], int(r["edge_id"]))
        p = float(r["softmax_prob"])
        if key not in best or p > best[key][0]:
            best[key] = (p, r["operator_name"])
    return {k: v[1] for k, v in best.items()}


def qualifying_epochs(acc: Dict[str, Dict[int, float]], threshold: float, mode: str,
                      scope: str) -> Dict[str, List[int]]:
    """Epochs whose accuracy is within ``threshold`` of the best (relative or absolute points)."""
    global_best = max((a for run in acc.values() for a in run.values()), default=0.0)
    out = {}
    for run, per_epoch in acc.items():
        best = global_best if scope == "global" else max(per_epoch.values(), default=0.0)
        cut = best * (1 - threshold) if mode == "relative" else best - threshold
        out[run] = sorted(e for e, a in per_epoch.items() if a >= cut)
    return out


def cmd_stats(run_dirs: Sequence[str], out_dir: str, threshold: float = 0.1, mode: str = "relative",
              scope: str = "global") -> Dict[str, int]:
    if not run_dirs:
        raise ConfigError("stats needs at least one run directory")
    os.makedirs(out_dir, exist_ok=True)
    acc, traj = {}, {}
    for run in run_dirs:
        acc[run] = _read_epoch_accuracy(run)
        path = os.path.join(run, "trajectory.csv")
        try:
            traj[run] = read_trajectory(path)
        except FileNotFoundError:
            raise ConfigError(f"{run}: missing trajectory.csv") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    keep = qualifying_epochs(acc, threshold, mode, scope)
    operators: List[str] = []
    for rows in traj.values():
        for r in rows:
            if r["operator_name"] not in operators:
                operators.append(r["operator_name"])
    counts = {op: 0 for op in operators if op != "none"}
    included = []
    for run in run_dirs:
        winners = epoch_argmax(traj[run])
        allowed = set(keep[run])
        for (epoch, cell_type, edge), op in sorted(winners.items()):
            if epoch in allowed:
                counts[op] += 1
        included.extend((run, e, acc[run][e]) for e in keep[run])
    with open(os.path.join(out_dir, "operator_counts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["operator_name", "count"])
        for op, n in counts.items():
            w.writerow([op, n])
    with open(os.path.join(out_dir, "included_epochs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "val_acc"])
        for row in included:
            w.writerow([row[0], row[1], f"{row[2]:.9g}"])
    with open(os.path.join(out_dir, "probability_series.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "cell_type", "edge_id", "operator_name", "epoch", "softmax_prob"])
        for run in run_dirs:
            for r in traj[run]:
                w.writerow([run, r["cell_type"], r["edge_id"], r["operator_name"], r["epoch"], r["softmax_prob"]])
    with open(os.path.join(out_dir, "operator_counts.svg"), "w") as fh:
        fh.write(bar_chart(list(counts), list(counts.values()), "Operator selections in qualifying epochs"))
    for i, run in enumerate(run_dirs):
        for cell_type in ("normal", "reduce"):
            rows = [r for r in traj[run] if r["cell_type"] == cell_type]
            edges = sorted({int(r["edge_id"]) for r in rows})
            for e in edges:
                sel = [r for r in rows if int(r["edge_id"]) == e]
                epochs = sorted({int(r["epoch"]) for r in sel})
                series = {op: [float(r["softmax_prob"]) for r in sel if r["operator_name"] == op]
                          for op in operators}
                name = f"run{i}_{cell_type}_edge{e}.svg"
                with open(os.path.join(out_dir, name), "w") as fh:
                    fh.write(line_chart(series, epochs, f"{os.path.basename(os.path.normpath(run))} "
                                                        f"{cell_type} edge {e}"))
    return counts


# ---------------------------------------------------------------------- ablate

ABLATION_AXES = ("nodes", "batch", "scale_constraint", "sparsity")


def ablation_config(base: dict, axis: str, setting) -> dict:
    cfg = copy.deepcopy(base)
    if axis == "nodes":
        cfg["arch"]["n_nodes"] = int(setting)
    elif axis == "batch":
        cfg["search"]["batch_size"] = int(setting)
    elif axis == "scale_constraint":
        if setting == "off":
            cfg["constraints"]["lambda1"] = 0.0
            cfg["constraints"]["lambda2"] = 0.0
    elif axis == "sparsity":
        if setting == "off":
            cfg["constraints"]["lambda3"] = 0.0
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    return cfg


def cmd_ablate(base: dict, axis: str, grid: Sequence, seeds: Sequence[int], retrain: bool = True) -> List[dict]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    if axis in ("scale_constraint", "sparsity"):
        grid = list(grid) or ["on", "off"]
        for g in grid:
            if g not in ("on", "off"):
                raise ConfigError(f"{axis} grid values must be 'on' or 'off', got {g!r}")
    root = base["output_dir"]
    os.makedirs(root, exist_ok=True)
    rows = []
    for seed in seeds:
        for setting in grid:
            cfg = ablation_config(base, axis, setting)
            cfg["seed"] = int(seed)
            cfg["output_dir"] = os.path.join(root, f"{axis}_{setting}_seed{seed}")
            from .config import validate
            validate(cfg)
            prep = prepare(cfg)
            rep = cmd_search(cfg, prep=prep)
            acc = rep.final_accuracy
            if retrain and cfg["retrain"]["epochs"] > 0:
                rcfg = copy.deepcopy(cfg)
                rcfg["output_dir"] = os.path.join(cfg["output_dir"], "retrain")
                acc = cmd_retrain(rcfg, rep.genotype_path, prep=prep).final_accuracy
            with open(os.path.join(cfg["output_dir"], "epochs.csv"), newline="") as fh:
                ep = list(csv.DictReader(fh))
            n_early = max(1, int(math.ceil(0.2 * len(ep))))
            phi_early = [float(r["phi_mean"]) for r in ep[:n_early]]
            lval_early = [float(r["L_val"]) for r in ep[:n_early]]
            rows.append({"axis": axis, "setting": setting, "seed": seed, "accuracy": acc,
                         "params": rep.param_count, "macs": rep.mac_count,
                         "phi_early_mean": float(np.mean(phi_early)),
                         "phi_final": float(ep[-1]["phi"]) if ep else float("nan"),
                         "val_loss_var_early": float(np.var(lval_early)), "paired_delta": ""})
    if axis in ("scale_constraint", "sparsity"):
        metric = "params" if axis == "scale_constraint" else "phi_early_mean"
        by = {(r["seed"], r["setting"]): r for r in rows}
        for r in rows:
            on, off = by.get((r["seed"], "on")), by.get((r["seed"], "off"))
            if on is not None and off is not None:
                r["paired_delta"] = on[metric] - off[metric]
    cols = ["axis", "setting", "seed", "accuracy", "params", "macs", "phi_early_mean", "phi_final",
            "val_loss_var_early", "paired_delta"]
    with open(os.path.join(root, f"ablate_{axis}.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows


# ----------------------------------------------------------------------- synth

def cmd_synth(cfg: dict, out_path: str, fmt: str = "dir") -> D.TrialSet:
    c = copy.deepcopy(cfg)
    c["data"]["source"] = "synth"
    trials = load_trials(c)
    if fmt == "dir":
        D.write_dir(trials, out_path)
    elif fmt == "csv":
        D.write_csv(trials, out_path)
    else:
        raise ConfigError(f"unknown synth output format {fmt!r}")
    return trials
