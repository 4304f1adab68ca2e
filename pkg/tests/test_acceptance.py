"""Acceptance suite: one PASS/FAIL verdict per criterion, printed and summarised at the end of the run.

Criteria 4, 5 and 6 run real searches and take tens of minutes; deselect them with ``-m "not slow"``.
"""

import copy
import csv
import hashlib
import math
import os
import shutil
import time

import numpy as np
import pytest
from helpers import check_op, numeric_grad, rel_error
from test_genotype import enumerate_weights, oracle_cell, random_genotype

from ctnas import experiment as X
from ctnas.config import constraint_config, load_config
from ctnas.constrained import (ConstraintConfig, SearchConfig, iterate_batches, omega, omega_raw, phi,
                               run_search)
from ctnas.core import functional as F
from ctnas.core import nn
from ctnas.core import tensor as T
from ctnas.core.tensor import Tensor, default_dtype
from ctnas.eeg_data import ingest, normalize, resample, slice_stack, split
from ctnas.genotype import (achievable_counts, best_operator, compile_genotype, count_params,
                            count_percentile, derive, genotype_param_count)
from ctnas.search_space import SearchSpace, build_operator, normalized_costs, param_count
from ctnas.supernet import ArchParams, CellTopology, MetaNet

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
TINY_OPS = ["none", "skip", "maxpool 3x1", "sep 3x1", "dil 3x1"]
INSTANCES = 20


def tiny_net(seed, dtype=np.float64):
    with default_dtype(dtype):
        space = SearchSpace.from_names(TINY_OPS, 2)
        return MetaNet(space, 2, 3, n_pairs=1, n_nodes=2, input_shape=(2, 8), seed=seed)


# --------------------------------------------------------------- criterion 1

def _distinct(rng, shape, gap=1e-2):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap).reshape(shape) + rng.uniform(0, gap / 10, size=shape)


def primitive_battery():
    """(name, make_case) pairs; ``make_case(rng)`` returns ``(op, arrays)`` for a float64 check."""
    def conv(rng):
        x, w, b = rng.standard_normal((2, 4, 5, 7)), rng.standard_normal((3, 4, 2, 3)), rng.standard_normal(3)
        return (lambda x, w, b: F.conv2d(x, w, b, stride=(1, 2), dilation=(2, 1), padding=(2, 1))), [x, w, b]

    def grouped(rng):
        x, w = rng.standard_normal((2, 4, 5, 6)), rng.standard_normal((4, 2, 3, 1))
        return (lambda x, w: F.conv2d(x, w, padding=(1, 0), groups=2)), [x, w]

    def depthwise(rng):
        x, w = rng.standard_normal((2, 3, 4, 9)), rng.standard_normal((3, 1, 1, 3))
        return (lambda x, w: F.conv2d(x, w, stride=(1, 2), dilation=(1, 2), padding=(0, 2), groups=3)), [x, w]

    def maxpool(rng):
        return (lambda x: F.maxpool2d(x, (3, 3), stride=(2, 1), padding=(1, 1))), [_distinct(rng, (2, 2, 5, 6))]

    def batch_norm(rng):
        x = rng.standard_normal((4, 3, 2, 3)) * 2 + 1
        return (lambda x, g, b: F.batch_norm(x, g, b)), [x, rng.standard_normal(3), rng.standard_normal(3)]

    def cross_entropy(rng):
        labels = rng.integers(0, 4, 5)
        return (lambda z: F.cross_entropy(z, labels)), [rng.standard_normal((5, 4)) * 3]

    def weighted_sum(rng):
        return (lambda w, a, b: F.weighted_sum(w, [a, None, b])), [rng.standard_normal(3),
                                                                    *rng.standard_normal((2, 2, 3, 4))]

    return [
        ("conv2d", conv), ("conv2d groups=2", grouped), ("depthwise conv", depthwise), ("maxpool2d", maxpool),
        ("elu", lambda r: (F.elu, [r.standard_normal((3, 7)) * 2])),
        ("leaky_relu", lambda r: ((lambda t: F.leaky_relu(t, 0.1)), [r.standard_normal((3, 7)) * 2])),
        ("batch_norm", batch_norm),
        ("softmax", lambda r: ((lambda t: F.softmax(t, axis=1)), [r.standard_normal((3, 5)) * 2])),
        ("log_softmax", lambda r: ((lambda t: F.log_softmax(t, axis=1)), [r.standard_normal((3, 5)) * 2])),
        ("cross_entropy", cross_entropy),
        ("linear", lambda r: (F.linear, [r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)])),
        ("global_avg_pool", lambda r: (F.global_avg_pool, [r.standard_normal((2, 3, 4, 5))])),
        ("subsample", lambda r: ((lambda t: F.subsample(t, (1, 2))), [r.standard_normal((2, 2, 3, 7))])),
        ("weighted_sum", weighted_sum),
        ("add (broadcast)", lambda r: ((lambda a, b: a + b), [r.standard_normal((3, 4)), r.standard_normal(4)])),
        ("mul (broadcast)", lambda r: ((lambda a, b: a * b), [r.standard_normal((3, 4)), r.standard_normal((3, 1))])),
        ("div", lambda r: ((lambda a, b: a / b), [r.standard_normal((3, 4)), r.uniform(0.5, 2, (3, 4))])),
        ("pow", lambda r: ((lambda a: a ** 3), [r.standard_normal((3, 4))])),
        ("exp", lambda r: ((lambda a: a.exp()), [r.standard_normal((3, 4))])),
        ("log", lambda r: ((lambda a: a.log()), [r.uniform(0.5, 3, (3, 4))])),
        ("matmul", lambda r: ((lambda a, b: a @ b), [r.standard_normal((3, 4)), r.standard_normal((4, 2))])),
        ("sum / mean", lambda r: ((lambda a: a.sum(axis=1) * a.mean(axis=0, keepdims=True).sum()),
                                  [r.standard_normal((3, 4))])),
        ("reshape / transpose / index", lambda r: ((lambda a: a.reshape(4, 3).transpose(1, 0)[1:, ::2]),
                                                   [r.standard_normal((3, 4))])),
        ("stack", lambda r: ((lambda a, b: T.stack([a, b], axis=1)), [*r.standard_normal((2, 3, 4))])),
    ]


def supernet_theta_error(instance):
    rng = np.random.default_rng(100 + instance)
    net = tiny_net(instance)
    x, labels = rng.standard_normal((3, 2, 2, 8)), rng.integers(0, 3, 3)
    normal, reduce = rng.standard_normal((2, 5, 5))
    theta = ArchParams.from_arrays(normal, reduce)
    F.cross_entropy(net(Tensor(x), theta), labels).backward()

    def loss(n, r):
        return float(F.cross_entropy(net(Tensor(x), ArchParams.from_arrays(n, r)), labels).data)

    return max(rel_error(theta.normal.grad, numeric_grad(loss, [normal, reduce], 0)),
               rel_error(theta.reduce.grad, numeric_grad(loss, [normal, reduce], 1)))


def supernet_weight_error(instance):
    """Coordinate checks on the 20 largest and 20 random weights plus one random direction."""
    rng = np.random.default_rng(200 + instance)
    net = tiny_net(instance)
    x, labels = Tensor(rng.standard_normal((3, 2, 2, 8))), rng.integers(0, 3, 3)
    theta = ArchParams.from_arrays(*rng.standard_normal((2, 5, 5)), requires_grad=False)
    params = net.parameters()
    F.cross_entropy(net(x, theta), labels).backward()
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
    base = [p.data.copy() for p in params]
    flat = np.concatenate([b.ravel() for b in base])

    def loss(v):
        offset = 0
        for p, b in zip(params, base):
            p.data = v[offset:offset + b.size].reshape(b.shape)
            offset += b.size
        return float(F.cross_entropy(net(x, theta), labels).data)

    coords = np.concatenate([np.argsort(-np.abs(analytic))[:20], rng.choice(flat.size, 20, replace=False)])
    numeric = np.empty(coords.size)
    for i, c in enumerate(coords):
        e = np.zeros_like(flat)
        e[c] = 1e-6
        numeric[i] = (loss(flat + e) - loss(flat - e)) / 2e-6
    direction = rng.standard_normal(flat.size)
    along = (loss(flat + 1e-6 * direction) - loss(flat - 1e-6 * direction)) / 2e-6
    exact = analytic @ direction
    return max(rel_error(analytic[coords], numeric), abs(along - exact) / (abs(exact) + 1e-8))


def float32_composite_error(instance):
    """float32 gradients of a conv/bn/elu/pool/linear graph and of the supernet, against float64 differences."""
    rng = np.random.default_rng(300 + instance)
    x = rng.standard_normal((3, 2, 4, 6))
    w = rng.standard_normal((3, 2, 3, 1)) * 0.5
    lw = rng.standard_normal((4, 3)) * 0.5
    labels = rng.integers(0, 4, 3)

    def graph(x, w, lw):
        h = F.elu(F.batch_norm(F.conv2d(x, w, padding=(1, 0)), None, None))
        return F.cross_entropy(F.linear(F.global_avg_pool(F.maxpool2d(h, (3, 1), (1, 1), (1, 0))), lw), labels)

    ts = [Tensor(a.astype(np.float32), requires_grad=True) for a in (x, w, lw)]
    graph(*ts).backward()

    def loss(*arrs):
        return float(graph(*[Tensor(a) for a in arrs]).data)

    worst = max(rel_error(ts[i].grad, numeric_grad(loss, [x, w, lw], i)) for i in range(3))

    net32, net64 = tiny_net(instance, np.float32), tiny_net(instance)
    xs, ys = rng.standard_normal((3, 2, 2, 8)), rng.integers(0, 3, 3)
    normal, reduce = rng.standard_normal((2, 5, 5))
    theta = ArchParams.from_arrays(normal, reduce, dtype=np.float32)
    F.cross_entropy(net32(Tensor(xs.astype(np.float32)), theta), ys).backward()

    def sloss(n, r):
        return float(F.cross_entropy(net64(Tensor(xs), ArchParams.from_arrays(n, r)), ys).data)

    return max(worst, rel_error(theta.normal.grad, numeric_grad(sloss, [normal, reduce], 0)))


def test_criterion_1_gradient_fidelity(verdict):
    start = time.time()
    errors = {}
    for k, (name, make) in enumerate(primitive_battery()):
        rng = np.random.default_rng(1000 + k)
        errors[name] = max(check_op(*make(rng), rng) for _ in range(INSTANCES))
    errors["supernet dL/dtheta"] = max(supernet_theta_error(i) for i in range(INSTANCES))
    errors["supernet dL/dw"] = max(supernet_weight_error(i) for i in range(INSTANCES))
    composite32 = max(float32_composite_error(i) for i in range(INSTANCES))
    elapsed = time.time() - start
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and composite32 < 1e-3 and elapsed < 300
    verdict(1, ok, f"{len(errors)} float64 checks x {INSTANCES}: worst {worst} {errors[worst]:.2e} (< 1e-4); "
                   f"float32 composites {composite32:.2e} (< 1e-3); {elapsed:.0f} s (< 300 s)")
    assert ok, errors


# --------------------------------------------------------------- criterion 2

def omega_oracle(blocks, sigma):
    total = 0.0
    for block in blocks:
        for row in block:
            m = max(row)
            e = [math.exp(v - m) for v in row]
            s = math.fsum(e)
            total += math.fsum(ei / s * si for ei, si in zip(e, sigma))
    return total


def phi_oracle(blocks, skip, temperature):
    total = 0.0
    for block in blocks:
        for row in block:
            z = [v / temperature for v in row]
            m = max(z)
            e = [math.exp(v - m) for v in z]
            total += e[skip] / math.fsum(e)
    return total


def test_criterion_2_relaxation_correctness(verdict):
    rng = np.random.default_rng(2)
    space = SearchSpace.named("desk", 8)
    cost = normalized_costs(space)
    sigma = [float(s) for s in cost.sigma]
    raw = [float(r) for r in cost.raw_params]
    worst_match = worst_shift = 0.0
    for _ in range(100):
        blocks = [rng.standard_normal((5, len(space))) * rng.uniform(0.1, 5) for _ in range(2)]
        temperature = float(rng.uniform(0.2, 5))
        shifted = [b + rng.uniform(-20, 20, (5, 1)) for b in blocks]
        values = (float(omega(blocks, cost).data), float(phi(blocks, space.skip_index, temperature).data),
                  float(omega_raw(blocks, cost).data))
        oracle = (omega_oracle(blocks, sigma), phi_oracle(blocks, space.skip_index, temperature),
                  omega_oracle(blocks, raw))
        shifted_values = (float(omega(shifted, cost).data), float(phi(shifted, space.skip_index, temperature).data))
        worst_match = max(worst_match, abs(values[0] - oracle[0]), abs(values[1] - oracle[1]),
                          abs(values[2] - oracle[2]) / max(raw))
        worst_shift = max(worst_shift, abs(values[0] - shifted_values[0]), abs(values[1] - shifted_values[1]))
    ok = worst_match < 1e-10 and worst_shift < 1e-10
    verdict(2, ok, f"100 random theta: oracle deviation {worst_match:.1e}, shift deviation {worst_shift:.1e} "
                   f"(< 1e-10)")
    assert ok


# --------------------------------------------------------------- criterion 3

def reference_darts(seed, x, y, vx, vy, epochs, batch_size, cfg):
    """Plain first-order DARTS: momentum SGD on w with L_train, Adam on theta with L_val."""
    net = tiny_net(seed, np.float32)
    init = net.new_arch_params(seed)
    theta = [init.normal.data.copy(), init.reduce.data.copy()]
    weights = net.weight_parameters()
    buffers = [np.zeros_like(p.data) for p in weights]
    m = [np.zeros_like(t) for t in theta]
    v = [np.zeros_like(t) for t in theta]
    b1, b2 = cfg.arch_betas
    rng = np.random.default_rng(seed + 1)
    steps_per_epoch = math.ceil(len(x) / batch_size)
    total = epochs * steps_per_epoch
    milestones = [int(round(f * total)) for f in cfg.arch_milestones]
    trajectory = []
    step = 0
    for _ in range(epochs):
        order_t = rng.permutation(len(x))
        order_v = rng.permutation(len(vx))
        for i in range(steps_per_epoch):
            idx = order_t[i * batch_size:(i + 1) * batch_size]
            vidx = order_v[i * batch_size:(i + 1) * batch_size]

            lr = cfg.w_lr_min + 0.5 * (cfg.w_lr - cfg.w_lr_min) * (1 + math.cos(math.pi * step / total))
            for p in weights:
                p.requires_grad, p.grad = True, None
            frozen = ArchParams.from_arrays(*theta, requires_grad=False)
            F.cross_entropy(net(Tensor(x[idx]), frozen), y[idx]).backward()
            norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in weights if p.grad is not None))
            scale = cfg.grad_clip / (norm + 1e-12) if norm > cfg.grad_clip else 1.0
            for p, buf in zip(weights, buffers):
                if p.grad is None:
                    continue
                g = p.grad * scale + cfg.w_weight_decay * p.data
                buf *= cfg.w_momentum
                buf += g
                p.data = p.data - lr * buf
            for p in weights:
                p.requires_grad, p.grad = False, None

            alr = cfg.arch_lr * cfg.arch_gamma ** sum(step >= s for s in milestones)
            live = ArchParams.from_arrays(*theta, requires_grad=True)
            F.cross_entropy(net(Tensor(vx[vidx]), live), vy[vidx]).backward()
            c1, c2 = 1 - b1 ** (step + 1), 1 - b2 ** (step + 1)
            for k, t in enumerate(live.tensors()):
                m[k] *= b1
                m[k] += (1 - b1) * t.grad
                v[k] *= b2
                v[k] += (1 - b2) * t.grad * t.grad
                theta[k] = theta[k] - alr * (m[k] / c1) / (np.sqrt(v[k] / c2) + 1e-8)
            trajectory.append([t.copy() for t in theta])
            step += 1
    return trajectory


def test_criterion_3_zero_penalty_reduces_to_darts(verdict):
    rng = np.random.default_rng(3)
    n, batch, epochs, seed = 40, 4, 5, 11
    x = rng.standard_normal((n, 2, 2, 8)).astype(np.float32)
    vx = rng.standard_normal((n, 2, 2, 8)).astype(np.float32)
    y, vy = rng.integers(0, 3, n), rng.integers(0, 3, n)
    assert len(iterate_batches(n, batch, np.random.default_rng(0))) == n // batch
    cfg = SearchConfig(epochs=epochs, batch_size=batch, seed=seed, patience=0, w_lr=0.05, arch_lr=0.05)
    zero = ConstraintConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    observed = []
    run_search(tiny_net(seed, np.float32), (x, y), (vx, vy), cfg, zero,
               on_step=lambda rec, theta: observed.append([t.copy() for t in theta.arrays()]))
    reference = reference_darts(seed, x, y, vx, vy, epochs, batch, cfg)
    identical = len(observed) == len(reference) == 50 and all(
        a.tobytes() == b.tobytes() for got, ref in zip(observed, reference) for a, b in zip(got, ref))
    moved = float(np.abs(reference[-1][0] - reference[0][0]).max())
    verdict(3, identical and moved > 0, f"{len(observed)} steps, theta bit-identical to reference: {identical} "
                                        f"(theta moved {moved:.3g})")
    assert identical and moved > 0


# --------------------------------------------------------------- criterion 4

def small_desk_config(seed, out, **overrides):
    """Desk architecture on a small synthetic set (30 trials/class, 450 points)."""
    pairs = [("seed", seed), ("output_dir", out), ("data.synth.trials_per_class", 30), ("data.synth.points", 450),
             ("search.batch_size", 16)]
    return load_config(None, pairs + list(overrides.items()))


@pytest.mark.slow
def test_criterion_4_scale_constraint(verdict, tmp_path):
    start = time.time()
    base = load_config(None, [("constraints.c_low", 0), ("constraints.c_high", "p40")])
    c_high = constraint_config(base).c_high
    a = base["arch"]
    counts, weights = achievable_counts(SearchSpace.named("desk", a["channels"]), a["n_pairs"], a["n_nodes"],
                                        a["classes"])
    assert c_high == count_percentile(counts, weights, 0.4)
    results = {"constrained": [], "unconstrained": []}
    for seed in range(5):
        for kind in results:
            lam2 = 0.05 if kind == "constrained" else 0.0
            cfg = small_desk_config(seed, str(tmp_path / f"{kind}{seed}"), **{
                "search.epochs": 20, "constraints.lambda1": 0.0, "constraints.lambda2": lam2,
                "constraints.lambda3": 0.0, "constraints.c_low": 0, "constraints.c_high": "p40"})
            results[kind].append(X.cmd_search(cfg).param_count)
    elapsed = time.time() - start
    mean_c, mean_u = np.mean(results["constrained"]), np.mean(results["unconstrained"])
    ok = mean_c < mean_u and max(results["constrained"]) <= 1.1 * c_high and elapsed < 7200
    verdict(4, ok, f"C_h=p40={c_high:.0f}; constrained {results['constrained']} mean {mean_c:.1f} vs "
                   f"unconstrained {results['unconstrained']} mean {mean_u:.1f}; max <= {1.1 * c_high:.0f}; "
                   f"{elapsed / 60:.1f} min (< 120)")
    assert ok


# --------------------------------------------------------------- criterion 5

@pytest.mark.slow
def test_criterion_5_sparsity_constraint(verdict, tmp_path):
    epochs = 30
    early = math.ceil(0.2 * epochs)
    beta = 0.5 * 2 * CellTopology(2).num_edges
    wins, pairs = 0, []
    for seed in range(5):
        means = {}
        for lam3 in (0.1, 0.0):
            cfg = small_desk_config(seed, str(tmp_path / f"l{lam3}_{seed}"), **{
                "search.epochs": epochs, "search.patience": 0, "constraints.lambda1": 0.0,
                "constraints.lambda2": 0.0, "constraints.lambda3": lam3, "constraints.beta": beta})
            X.cmd_search(cfg, stop_epoch=early)
            with open(os.path.join(cfg["output_dir"], "epochs.csv")) as fh:
                rows = list(csv.DictReader(fh))
            assert len(rows) == early
            means[lam3] = float(np.mean([float(r["phi_mean"]) for r in rows]))
        pairs.append((round(means[0.1], 4), round(means[0.0], 4)))
        wins += means[0.1] > means[0.0]
    ok = wins >= 4
    verdict(5, ok, f"beta={beta:g}, first {early}/{epochs} epochs, mean Phi (lambda3=0.1, 0): {pairs}; "
                   f"{wins}/5 pairs higher (>= 4)")
    assert ok


# --------------------------------------------------------------- criterion 6

@pytest.mark.slow
def test_criterion_6_end_to_end_synthetic(verdict, tmp_path):
    outcomes = []
    for seed in range(3):
        start = time.time()
        cfg = load_config(None, [("seed", seed), ("output_dir", str(tmp_path / f"s{seed}"))])
        assert (cfg["data"]["synth"]["snr_db"], cfg["data"]["synth"]["channels"], cfg["data"]["synth"]["points"],
                cfg["data"]["synth"]["trials_per_class"], cfg["arch"]["classes"]) == (20.0, 8, 750, 200, 4)
        prep = X.prepare(cfg)
        search = X.cmd_search(cfg, prep=prep)
        rcfg = copy.deepcopy(cfg)
        rcfg["output_dir"] = os.path.join(cfg["output_dir"], "retrain")
        rep = X.cmd_retrain(rcfg, search.genotype_path, prep=prep)
        minutes = (time.time() - start) / 60
        outcomes.append((rep.final_accuracy, rep.kappa, minutes))
    ok = all(acc >= 0.9 and kappa >= 0.85 and minutes < 30 for acc, kappa, minutes in outcomes)
    detail = "; ".join(f"seed {s}: acc {a:.3f} kappa {k:.3f} {m:.1f} min" for s, (a, k, m) in enumerate(outcomes))
    verdict(6, ok, f"{detail} (>= 0.90, >= 0.85, < 30 min, 3/3)")
    assert ok


# --------------------------------------------------------------- criterion 7

def test_criterion_7_derivation_oracle(verdict):
    rng = np.random.default_rng(7)
    space = SearchSpace.named("desk", 8)
    mismatches = argmax_changes = 0
    for i in range(1000):
        normal, reduce = rng.standard_normal((2, 5, len(space)))
        if i % 3 == 0:
            normal, reduce = np.round(normal, 1), np.round(reduce, 1)
        g = derive((normal, reduce), space, n_pairs=2, classes=4)
        mismatches += (g.normal, g.reduce) != (oracle_cell(normal, space, 2), oracle_cell(reduce, space, 2))
        for tau in rng.uniform(0.01, 100, 3):
            for row in np.vstack([normal, reduce]):
                argmax_changes += best_operator(row, space.none_index) != best_operator(row * tau,
                                                                                        space.none_index)
    ok = mismatches == 0 and argmax_changes == 0
    verdict(7, ok, f"1000 theta: {mismatches} derive/oracle mismatches; {argmax_changes} per-edge argmax changes "
                   f"over 30000 temperature rescalings")
    assert ok


# --------------------------------------------------------------- criterion 8

def test_criterion_8_accounting_exactness(verdict):
    op_mismatch = []
    for c in (4, 8, 22):
        for spec in SearchSpace.named("full", c).operators:
            if enumerate_weights(build_operator(spec, c)) != param_count(spec, c):
                op_mismatch.append((spec.name, c))
    rng = np.random.default_rng(8)
    geno_mismatch = 0
    for _ in range(10):
        g = random_genotype(rng, SearchSpace.named("desk", 8))
        net = compile_genotype(g, input_shape=(8, 64))
        geno_mismatch += not (count_params(net) == enumerate_weights(net) == genotype_param_count(g))
    c, h, w = 6, 5, 9
    macs = []
    for kernel, pad in (((1, 1), (0, 0)), ((3, 1), (1, 0))):
        with F.MacCounter() as counter:
            nn.Conv2d(c, c, kernel, padding=pad)(Tensor(np.zeros((1, c, h, w), np.float32)))
        macs.append((counter.total, c * c * h * w * kernel[0] * kernel[1]))
    ok = not op_mismatch and geno_mismatch == 0 and all(a == b for a, b in macs)
    verdict(8, ok, f"operator mismatches {op_mismatch or 'none'} at C in (4, 8, 22); {geno_mismatch}/10 genotype "
                   f"mismatches; MACs 1x1 {macs[0][0]}={macs[0][1]}, 3x1 {macs[1][0]}={macs[1][1]}")
    assert ok


# --------------------------------------------------------------- criterion 9

def pipeline_digest():
    trials = resample(ingest(os.path.join(FIXTURES, "trials_500hz")), 250.0)
    train, val = normalize(*split(trials, "mixed", 0))
    a, b = slice_stack(train, 400, 50), slice_stack(val, 400, 50)
    return hashlib.sha256(a.tensor.tobytes() + b.tensor.tobytes()).hexdigest(), a.tensor.shape


def test_criterion_9_pipeline_determinism(verdict):
    (d1, shape), (d2, _) = pipeline_digest(), pipeline_digest()
    data = np.random.default_rng(9).standard_normal((3, 4, 750)).astype(np.float32)
    sb = slice_stack(data, 400, 50)
    overlaps = all(np.array_equal(sb.tensor[:, :, s, 50:], sb.tensor[:, :, s + 1, :350]) for s in range(7))
    windows = all(np.array_equal(sb.tensor[:, :, s], data[:, :, 50 * s:50 * s + 400]) for s in range(8))
    ok = d1 == d2 and shape[2:] == (8, 400) and sb.n_slices == 8 and overlaps and windows
    verdict(9, ok, f"fixture pipeline sha256 {d1[:12]} repeated: {d1 == d2}; S={sb.n_slices}, "
                   f"350-point overlaps elementwise: {overlaps}")
    assert ok


# -------------------------------------------------------------- criterion 10

def recount(run_dirs, threshold):
    """Independent recount straight from the CSV files."""
    acc = {}
    for run in run_dirs:
        with open(os.path.join(run, "epochs.csv")) as fh:
            acc[run] = {int(r["epoch"]): float(r["val_acc"]) for r in csv.DictReader(fh)}
    best = max(a for per in acc.values() for a in per.values())
    counts = {}
    for run in run_dirs:
        winners = {}
        with open(os.path.join(run, "trajectory.csv")) as fh:
            for r in csv.DictReader(fh):
                if r["operator_name"] == "none" or acc[run][int(r["epoch"])] < best * (1 - threshold):
                    continue
                key = (r["epoch"], r["cell_type"], r["edge_id"])
                p = float(r["softmax_prob"])
                if key not in winners or p > winners[key][0]:
                    winners[key] = (p, r["operator_name"])
        for _, op in winners.values():
            counts[op] = counts.get(op, 0) + 1
    return counts


def test_criterion_10_stats_reproducibility(verdict, tmp_path):
    dirs = []
    for seed in range(2):
        cfg = load_config(None, [("seed", seed), ("output_dir", str(tmp_path / f"run{seed}")),
                                 ("arch.channels", 2), ("arch.classes", 2), ("data.synth.channels", 2),
                                 ("data.synth.classes", 2), ("data.synth.trials_per_class", 12),
                                 ("data.synth.points", 450), ("search.epochs", 5), ("search.batch_size", 8)])
        X.cmd_search(cfg)
        dirs.append(cfg["output_dir"])
    degraded = str(tmp_path / "degraded")
    shutil.copytree(dirs[0], degraded)
    path = os.path.join(degraded, "epochs.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({**r, "val_acc": f"{float(r['val_acc']) * 0.5:.9g}"})
    dirs.append(degraded)
    counts = X.cmd_stats(dirs, str(tmp_path / "stats"), threshold=0.1)
    expected = recount(dirs, 0.1)
    match = {k: v for k, v in counts.items() if v} == expected
    with open(tmp_path / "stats" / "included_epochs.csv") as fh:
        included_runs = {r["run"] for r in csv.DictReader(fh)}
    excluded = degraded not in included_runs
    ok = match and excluded and sum(expected.values()) > 0
    verdict(10, ok, f"counts {dict(sorted(counts.items()))} match recount: {match}; degraded run excluded: "
                    f"{excluded}")
    assert ok
