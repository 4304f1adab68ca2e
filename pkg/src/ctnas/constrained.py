"""Penalised bi-level architecture search.

The weight step descends the training loss with θ frozen; the θ step
descends the validation loss plus hinge penalties on the expected
parameter scale Ω and on the skip-connection mass Φ, with w frozen.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import functional as F
from .core.optim import SGD, Adam, cosine_lr, multistep_lr
from .core.tensor import Tensor, add_n, maximum, tsum
from .genotype import Genotype, derive
from .search_space import CostModel, SearchSpace, normalized_costs
from .supernet import ArchParams, DivergenceError, MetaNet

ThetaLike = Union[ArchParams, Tensor, np.ndarray, Sequence]

TRAJECTORY_COLUMNS = ("epoch", "cell_type", "edge_id", "operator_name", "softmax_prob", "omega_raw", "phi",
                      "skip_floor", "L_train", "L_val", "L_lag")


class ConstraintError(ValueError):
    pass


def _blocks(theta: ThetaLike) -> List[Tensor]:
    if isinstance(theta, ArchParams):
        return theta.tensors()
    if isinstance(theta, Tensor):
        return [theta]
    if isinstance(theta, np.ndarray):
        return [Tensor(theta)]
    return [t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in theta]


def _expected_cost(theta: ThetaLike, values: np.ndarray) -> Tensor:
    terms = []
    for block in _blocks(theta):
        if block.shape[-1] != values.shape[0]:
            raise ConstraintError(f"θ has {block.shape[-1]} operators per edge, cost model has {values.shape[0]}")
        probs = F.softmax(block, axis=-1)
        terms.append(tsum(probs * Tensor(values.astype(block.dtype))))
    return add_n(terms) if len(terms) > 1 else terms[0]


def omega(theta: ThetaLike, cost: CostModel) -> Tensor:
    """Σ_edges Σ_o softmax(θ_edge)_o · σ_o over every block of θ."""
    return _expected_cost(theta, np.asarray(cost.sigma))


def omega_raw(theta: ThetaLike, cost: CostModel, cells_per_type: int = 1, base: float = 0.0) -> Tensor:
    """Expected parameter count: ``base + cells_per_type · Σ softmax · raw``."""
    out = _expected_cost(theta, np.asarray(cost.raw_params))
    if cells_per_type != 1:
        out = out * float(cells_per_type)
    if base:
        out = out + float(base)
    return out


def phi(theta: ThetaLike, skip_index: Optional[int], temperature: float = 1.0, mode: str = "sum") -> Tensor:
    """Skip-connection mass: Σ_edges softmax(θ_edge / T)_skip (or its per-edge mean)."""
    if skip_index is None:
        raise ConstraintError("the search space has no 'skip' operator")
    if temperature <= 0:
        raise ConstraintError("temperature must be > 0")
    if mode not in ("sum", "mean"):
        raise ConstraintError(f"unknown phi mode {mode!r}")
    terms = []
    n_edges = 0
    for block in _blocks(theta):
        scaled = block if temperature == 1.0 else block * (1.0 / temperature)
        probs = F.softmax(scaled, axis=-1)
        terms.append(tsum(probs[..., skip_index]))
        n_edges += int(np.prod(block.shape[:-1]))
    out = add_n(terms) if len(terms) > 1 else terms[0]
    return out * (1.0 / n_edges) if mode == "mean" else out


def skip_floor(t: float, beta: float) -> float:
    if t < 0:
        raise ConstraintError("t must be >= 0")
    return beta * math.exp(-t)


def normalized_time(epoch: int, total_epochs: int, time_scale: float = 5.0) -> float:
    return 0.0 if total_epochs <= 0 else epoch / total_epochs * time_scale


@dataclass
class ConstraintConfig:
    c_low: float = 18200.0
    c_high: float = 32100.0
    lambda1: float = 0.05
    lambda2: float = 0.05
    lambda3: float = 0.1
    beta: Optional[float] = None
    temperature: float = 1.0
    time_scale: float = 5.0
    bounds_unit: str = "raw"
    phi_mode: str = "sum"

    def validate(self, num_edges: Optional[int] = None) -> None:
        if not self.c_low < self.c_high:
            raise ConstraintError(f"c_low ({self.c_low}) must be below c_high ({self.c_high})")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConstraintError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ConstraintError("temperature must be > 0")
        if self.time_scale < 0:
            raise ConstraintError("time_scale must be >= 0")
        if self.bounds_unit not in ("raw", "sigma"):
            raise ConstraintError("bounds_unit must be 'raw' or 'sigma'")
        if self.phi_mode not in ("sum", "mean"):
            raise ConstraintError("phi_mode must be 'sum' or 'mean'")
        if self.beta is not None:
            top = 1.0 if self.phi_mode == "mean" else num_edges
            if self.beta <= 0 or (top is not None and self.beta > top):
                raise ConstraintError(f"beta must lie in (0, {top}]")

    def resolved_beta(self, num_edges: int) -> float:
        if self.beta is not None:
            return self.beta
        return 0.5 if self.phi_mode == "mean" else 0.5 * num_edges

    @property
    def unconstrained(self) -> bool:
        return self.lambda1 == 0 and self.lambda2 == 0 and self.lambda3 == 0

    @classmethod
    def scaled_defaults(cls, channels: int, **overrides) -> "ConstraintConfig":
        """Default bounds rescaled from 22 electrodes to ``channels``."""
        s = (channels / 22.0) ** 2
        cfg = cls(c_low=18200.0 * s, c_high=32100.0 * s)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class PenaltyTerms:
    omega: float
    omega_raw: float
    phi: float
    floor: float
    lower: float
    upper: float
    skip: float

    @property
    def active(self) -> Tuple[bool, bool, bool]:
        return self.lower > 0, self.upper > 0, self.skip > 0


def _hinge(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


def lagrangian_loss(l_val: Tensor, theta: ThetaLike, cfg: ConstraintConfig, t: float, cost: CostModel,
                    skip_index: Optional[int], cells_per_type: int = 1,
                    base: float = 0.0) -> Tuple[Tensor, PenaltyTerms]:
    """L_val + λ1·[C_l − Ω]₊ + λ2·[Ω − C_h]₊ + λ3·[P_skip(t) − Φ]₊.

    Terms with a zero weight are left out of the graph entirely, so a
    fully unconstrained configuration returns ``l_val`` itself.
    """
    blocks = _blocks(theta)
    num_edges = sum(int(np.prod(b.shape[:-1])) for b in blocks)
    om = omega(blocks, cost)
    om_raw = omega_raw(blocks, cost, cells_per_type, base)
    scale = om_raw if cfg.bounds_unit == "raw" else om
    ph = phi(blocks, skip_index, cfg.temperature, cfg.phi_mode) if skip_index is not None else None
    floor = skip_floor(t, cfg.resolved_beta(num_edges))
    low = _hinge(cfg.c_low - scale)
    high = _hinge(scale - cfg.c_high)
    terms = [l_val]
    if cfg.lambda1:
        terms.append(low * cfg.lambda1)
    if cfg.lambda2:
        terms.append(high * cfg.lambda2)
    skip_pen = 0.0
    if ph is not None:
        gap = _hinge(floor - ph)
        skip_pen = float(gap.data)
        if cfg.lambda3:
            terms.append(gap * cfg.lambda3)
    elif cfg.lambda3:
        raise ConstraintError("the search space has no 'skip' operator")
    loss = add_n(terms) if len(terms) > 1 else l_val
    info = PenaltyTerms(
        omega=float(om.data), omega_raw=float(om_raw.data), phi=float(ph.data) if ph is not None else float("nan"),
        floor=floor, lower=float(low.data), upper=float(high.data), skip=skip_pen)
    return loss, info


# ------------------------------------------------------------------------ search

@dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 32
    w_lr: float = 0.01
    w_lr_min: float = 1e-4
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    arch_lr: float = 0.01
    arch_betas: Tuple[float, float] = (0.5, 0.99)
    arch_milestones: Tuple[float, ...] = (0.5, 0.75)
    arch_gamma: float = 0.5
    arch_weight_decay: float = 0.0
    patience: int = 10
    seed: int = 0
    check_invariants: bool = True


def weight_checksum(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_train: float
    l_val: float
    l_lag: float
    penalty: PenaltyTerms
    val_acc: float = float("nan")


@dataclass
class SearchState:
    w_opt: SGD
    arch_opt: Adam
    total_steps: int
    arch_milestones: Tuple[int, ...]
    epoch: int = 0
    step: int = 0
    history: List[StepRecord] = field(default_factory=list)

    @property
    def phi_history(self) -> np.ndarray:
        return np.array([r.penalty.phi for r in self.history])


class SearchDiverged(DivergenceError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def new_state(net: MetaNet, theta: ArchParams, cfg: SearchConfig, steps_per_epoch: int) -> SearchState:
    total = max(cfg.epochs * steps_per_epoch, 1)
    w_opt = SGD(net.weight_parameters(), lr=cfg.w_lr, momentum=cfg.w_momentum,
                weight_decay=cfg.w_weight_decay, grad_clip=cfg.grad_clip)
    arch_opt = Adam(theta.tensors(), lr=cfg.arch_lr, betas=tuple(cfg.arch_betas),
                    weight_decay=cfg.arch_weight_decay)
    milestones = tuple(int(round(m * total)) for m in cfg.arch_milestones)
    return SearchState(w_opt, arch_opt, total, milestones)


def _set_requires_grad(params: Sequence[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None


def _snapshot(state: SearchState, theta: ArchParams, **extra) -> dict:
    snap = {"epoch": state.epoch, "step": state.step,
            "theta_normal": theta.normal.data.tolist(), "theta_reduce": theta.reduce.data.tolist(),
            "w_lr": state.w_opt.lr, "arch_lr": state.arch_opt.lr}
    if state.history:
        last = state.history[-1]
        snap["last_losses"] = {"L_train": last.l_train, "L_val": last.l_val, "L_lag": last.l_lag}
    snap.update(extra)
    return snap


def _check_loss(value: float, what: str, state: SearchState, theta: ArchParams) -> None:
    if not math.isfinite(value):
        raise SearchDiverged(f"{what} became {value} at epoch {state.epoch}, step {state.step}",
                             _snapshot(state, theta, failed=what))


def search_step(state: SearchState, net: MetaNet, theta: ArchParams, train_batch, val_batch,
                cfg: SearchConfig, constraints: ConstraintConfig, cost: CostModel, t: float) -> StepRecord:
    """One weight update on ``train_batch`` then one θ update on ``val_batch``."""
    weights = net.weight_parameters()
    arch = theta.tensors()
    xt, yt = train_batch
    xv, yv = val_batch

    state.w_opt.lr = cosine_lr(state.step, state.total_steps, cfg.w_lr, cfg.w_lr_min)
    _set_requires_grad(arch, False)
    _set_requires_grad(weights, True)
    l_train = F.cross_entropy(net(Tensor(xt), theta), yt)
    _check_loss(float(l_train.data), "L_train", state, theta)
    l_train.backward()
    state.w_opt.step()
    _set_requires_grad(weights, False)

    before = weight_checksum(weights) if cfg.check_invariants else None
    state.arch_opt.lr = multistep_lr(state.step, cfg.arch_lr, state.arch_milestones, cfg.arch_gamma)
    _set_requires_grad(arch, True)
    logits = net(Tensor(xv), theta)
    val_acc = float(np.mean(logits.data.argmax(axis=1) == np.asarray(yv)))
    l_val = F.cross_entropy(logits, yv)
    _check_loss(float(l_val.data), "L_val", state, theta)
    base = fixed_params(net)
    l_lag, info = lagrangian_loss(l_val, theta, constraints, t, cost, net.space.skip_index, net.n_pairs, base)
    _check_loss(float(l_lag.data), "L_lag", state, theta)
    l_lag.backward()
    state.arch_opt.step()
    try:
        theta.check_finite()
    except DivergenceError as exc:
        raise SearchDiverged(str(exc), _snapshot(state, theta, failed="theta")) from None
    if before is not None and weight_checksum(weights) != before:
        raise AssertionError("θ step modified network weights")
    _set_requires_grad(weights, True)

    rec = StepRecord(state.step, state.epoch, float(l_train.data), float(l_val.data), float(l_lag.data), info,
                     val_acc)
    state.history.append(rec)
    state.step += 1
    return rec


def fixed_params(net: MetaNet) -> int:
    """Parameters outside the cells (stem and head)."""
    c, k = net.channels, net.classes
    return c * c + 2 * c + c * k + k


# ------------------------------------------------------------------ trajectory

class TrajectoryLog:
    """Per-epoch softmax probability of every operator on every edge."""

    def __init__(self, path: Optional[str] = None):
        self.rows: List[tuple] = []
        self.path = path
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(TRAJECTORY_COLUMNS)

    def append(self, row: tuple) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(_format_row(row))

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None

    def __len__(self) -> int:
        return len(self.rows)


def _format_row(row: tuple) -> list:
    return [f"{v:.9g}" if isinstance(v, float) else v for v in row]


def read_trajectory(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected trajectory columns {reader.fieldnames}")
        return list(reader)


def log_epoch(log: TrajectoryLog, epoch: int, theta: ArchParams, space: SearchSpace, stats: Dict[str, float]) -> None:
    for cell_type, block in (("normal", theta.normal.data), ("reduce", theta.reduce.data)):
        z = block.astype(np.float64)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        for e in range(p.shape[0]):
            for o, name in enumerate(space.names):
                log.append((epoch, cell_type, e, name, float(p[e, o]), stats["omega_raw"], stats["phi"],
                            stats["skip_floor"], stats["L_train"], stats["L_val"], stats["L_lag"]))
    log.flush()


# ----------------------------------------------------------------- driver

@dataclass
class SearchResult:
    theta: ArchParams
    state: SearchState
    trajectory: TrajectoryLog
    genotype: Genotype
    epoch_stats: List[Dict[str, float]]
    converged_at: Optional[int] = None


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def run_search(net: MetaNet, train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray],
               cfg: SearchConfig, constraints: ConstraintConfig, theta: Optional[ArchParams] = None,
               trajectory: Optional[TrajectoryLog] = None, stop_epoch: Optional[int] = None,
               on_epoch: Optional[Callable[[Dict[str, float]], None]] = None,
               on_step: Optional[Callable[[StepRecord, ArchParams], None]] = None) -> SearchResult:
    """Alternate weight and θ steps for ``cfg.epochs`` epochs or until the genotype is stable.

    ``stop_epoch`` ends the run early without altering any schedule, so the
    epochs that do run are identical to the same epochs of a full run.
    """
    xt, yt = train
    xv, yv = val
    if len(xt) == 0 or len(xv) == 0:
        raise ValueError("search needs non-empty train and validation halves")
    theta = theta if theta is not None else net.new_arch_params(cfg.seed)
    constraints.validate(2 * net.topology.num_edges)
    cost = normalized_costs(net.space)
    trajectory = trajectory if trajectory is not None else TrajectoryLog()
    steps_per_epoch = len(iterate_batches(len(xt), cfg.batch_size, np.random.default_rng(0)))
    state = new_state(net, theta, cfg, steps_per_epoch)
    rng = np.random.default_rng(cfg.seed + 1)
    num_edges = 2 * net.topology.num_edges
    last_geno = None
    stable = 0
    epoch_stats: List[Dict[str, float]] = []
    converged_at = None
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    net.train()
    for epoch in range(end):
        state.epoch = epoch
        t = normalized_time(epoch, cfg.epochs, constraints.time_scale)
        train_batches = iterate_batches(len(xt), cfg.batch_size, rng)
        val_batches = iterate_batches(len(xv), cfg.batch_size, rng)
        records = []
        for i, idx in enumerate(train_batches):
            vidx = val_batches[i % len(val_batches)]
            records.append(search_step(state, net, theta, (xt[idx], yt[idx]), (xv[vidx], yv[vidx]), cfg,
                                       constraints, cost, t))
            if on_step is not None:
                on_step(records[-1], theta)
        stats = {
            "epoch": epoch,
            "L_train": float(np.mean([r.l_train for r in records])),
            "L_val": float(np.mean([r.l_val for r in records])),
            "L_lag": float(np.mean([r.l_lag for r in records])),
            "val_acc": float(np.mean([r.val_acc for r in records])),
            "omega_raw": records[-1].penalty.omega_raw,
            "phi": records[-1].penalty.phi,
            "phi_mean": float(np.mean([r.penalty.phi for r in records])),
            "skip_floor": skip_floor(t, constraints.resolved_beta(num_edges)),
        }
        epoch_stats.append(stats)
        log_epoch(trajectory, epoch, theta, net.space, stats)
        if on_epoch is not None:
            on_epoch(stats)
        geno = derive(theta, net.space, net.n_pairs, net.classes)
        geno_key = (geno.normal, geno.reduce)
        stable = stable + 1 if geno_key == last_geno else 0
        last_geno = geno_key
        if cfg.patience and stable >= cfg.patience:
            converged_at = epoch
            break
    state.epoch = len(epoch_stats)
    genotype = derive(theta, net.space, net.n_pairs, net.classes)
    return SearchResult(theta, state, trajectory, genotype, epoch_stats, converged_at)
