"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed in the terminal summary).  The
desk-scale MNIST trends (criteria 5 to 8) share one set of runs: per seed, one
generator with the contrastive term feeding three classifier arms, one
generator without it, and the naive baseline.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from gkcl import harness
from gkcl import numcore as nc
from gkcl.cli import main
from gkcl.cltrain import run_naive_baseline, run_sequence
from gkcl.contrastive import ConLossConfig, ProjectionParams, generator_objective, supcon_loss
from gkcl.data import TASK_INCREMENTAL
from gkcl.genmodel import GenBatch, GenConfig, GenerativeModel
from gkcl.kernels import KernelSpec, RidgeConfig, krr_predict, one_hot
from gkcl.metrics import AccuracyMatrix, average_accuracy, average_forgetting
from gkcl.numcore import RngState

from oracles import (average_accuracy_loop, average_forgetting_loop, central_fd, dense_inverse_krr, max_rel_error,
                     supcon_double_loop)

DESK_ARMS = {
    "gkcl": {},
    "identity": {"kernel_network": False},
    "train5": {"coreset_train": 5, "coreset_infer": 20},
}


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    model = GenerativeModel(GenConfig(12, 2, TASK_INCREMENTAL, (16,), 4), 0)
    model.register_task(1, [0, 1])
    proj = ProjectionParams(16, 8, 0)
    rng = np.random.default_rng(1)
    cur = GenBatch(rng.uniform(0, 1, (6, 12)), [0, 1, 0, 1, 1, 0], np.ones(6))
    rep = GenBatch(rng.uniform(0, 1, (4, 12)), [1, 0, 1, 0], np.ones(4))
    con = ConLossConfig(tau=0.5, weight=1.0)
    params = model.parameters() + proj.parameters()

    def value():
        with nc.no_grad():
            return float(generator_objective(model, proj, cur, rep, RngState(2), con)[0].value[0, 0])

    loss, _ = generator_objective(model, proj, cur, rep, RngState(2), con)
    nc.backward(loss)
    err = max_rel_error([p.grad for p in params], central_fd(value, [p.value for p in params], h=1e-5))
    elapsed = time.perf_counter() - t0
    criterion(1, "gradient of the full objective vs central differences", err < 1e-4 and elapsed < 60,
              f"max rel error {err:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_criterion_02_krr_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    specs = {"linear": KernelSpec.linear(), "polynomial": KernelSpec.polynomial(2, 1.0),
             "rbf": KernelSpec.rbf(1.5)}
    oracle_kw = {"linear": {}, "polynomial": {"degree": 2, "offset": 1.0}, "rbf": {"bandwidth": 1.5}}
    worst = 0.0
    for i in range(50):
        kind = list(specs)[i % 3]
        c = int(rng.integers(2, 6))
        n_c = int(rng.integers(c, 51))
        d = int(rng.integers(2, 9))
        labels = np.concatenate([np.arange(c), rng.integers(0, c, n_c - c)])
        phi_c, phi_q = rng.standard_normal((d, n_c)) / math.sqrt(d), rng.standard_normal((d, 7)) / math.sqrt(d)
        y = one_hot(labels, c)
        lam = float(rng.uniform(0.05, 2.0))
        ours = krr_predict(phi_c, y, phi_q, RidgeConfig(lam), specs[kind])
        ref = dense_inverse_krr(phi_c.tolist(), y.tolist(), phi_q.tolist(), lam, kind, **oracle_kw[kind])
        worst = max(worst, float(np.abs(ours - ref).max()))
    elapsed = time.perf_counter() - t0
    criterion(2, "kernel ridge regression vs dense-inverse oracle", worst < 1e-8 and elapsed < 60,
              f"50 instances, max |dp| {worst:.2e} (< 1e-8), {elapsed:.1f}s")


def test_criterion_03_metric_exactness(criterion):
    hand = [
        average_accuracy(AccuracyMatrix.from_rows([[0.9]]), 1) == 0.9,
        abs(average_accuracy(AccuracyMatrix.from_rows([[0.5], [0.6, 0.9]]), 2) - 0.75) < 1e-15,
        abs(average_forgetting(AccuracyMatrix.from_rows([[0.8], [0.6, 0.9]])) - 0.2) < 1e-15,
        average_forgetting(AccuracyMatrix.from_rows([[0.7] * t for t in range(1, 5)])) == 0.0,
    ]
    worst = 0.0
    rng = np.random.default_rng(3)
    for i in range(100):
        T = 2 + i % 7
        rows = [rng.uniform(0, 1, t).tolist() for t in range(1, T + 1)]
        m = AccuracyMatrix.from_rows(rows)
        worst = max(worst, abs(average_forgetting(m) - average_forgetting_loop(rows)),
                    *(abs(average_accuracy(m, t) - average_accuracy_loop(rows, t)) for t in range(1, T + 1)))
    criterion(3, "average accuracy and forgetting", all(hand) and worst < 1e-15,
              f"{sum(hand)}/4 worked examples, 100 random matrices max |d| {worst:.1e} (< 1e-15)")


def test_criterion_04_supcon_closed_form(criterion):
    s = np.tile([[0.6, 0.8]], (4, 1))
    closed = abs(float(supcon_loss(s, [1, 1, 1, 1], 0.08)[0, 0]) - 4 * math.log(3))
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        e = rng.standard_normal((12, 5))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        labels = rng.integers(0, 3, 12)
        ref = supcon_double_loop(e.tolist(), labels.tolist(), 0.08)
        worst = max(worst, abs(float(supcon_loss(e, labels, 0.08)[0, 0]) - ref))
    criterion(4, "supervised contrastive loss", closed < 1e-10 and worst < 1e-9,
              f"identical embeddings |L - 4 log 3| {closed:.1e} (< 1e-10), double loop max |d| {worst:.1e} (< 1e-9)")


@pytest.fixture(scope="session")
def desk():
    """Desk-profile PermutedMNIST runs for seeds 1, 2, 3."""
    exp = harness.build_config({"profile": "desk"})
    assert exp.tasks == 5 and exp.train_subset == 10000
    out = {"seeds": exp.seeds, "runs": {}, "no_con": {}, "baseline": {}, "seconds": {}}
    no_con = replace(exp.train, con_weight=0.0)
    for seed in exp.seeds:
        stream = harness.make_stream(exp, seed)
        t0 = time.perf_counter()
        out["runs"][seed] = run_sequence(stream, exp.train, seed, arms=DESK_ARMS, eval_sizes={"train5": (1,)})
        t1 = time.perf_counter()
        out["baseline"][seed] = run_naive_baseline(stream, exp.train, seed)
        t2 = time.perf_counter()
        out["no_con"][seed] = run_sequence(stream, no_con, seed)["gkcl"]
        out["seconds"][seed] = {"method": t1 - t0, "baseline": t2 - t1}
    return out


def _final(desk, key, arm=None, size=None):
    values = []
    for seed in desk["seeds"]:
        res = desk[key][seed] if arm is None else desk[key][seed][arm]
        m = res.matrix if size is None else res.matrices[size]
        values.append(average_accuracy(m))
    return values


def _forgetting(desk, key, arm=None):
    return [average_forgetting((desk[key][s] if arm is None else desk[key][s][arm]).matrix) for s in desk["seeds"]]


def _fmt(values):
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


@pytest.mark.slow
def test_criterion_05_permuted_trend(criterion, desk):
    ours, base = _final(desk, "runs", "gkcl"), _final(desk, "baseline")
    f_ours, f_base = _forgetting(desk, "runs", "gkcl"), _forgetting(desk, "baseline")
    minutes = sum(s["method"] + s["baseline"] for s in desk["seconds"].values()) / 60
    gap = 100 * (np.mean(ours) - np.mean(base))
    ok = gap >= 10 and np.mean(f_ours) <= 0.10 and np.mean(f_base) >= 0.15 and minutes < 45
    criterion(5, "desk PermutedMNIST vs naive baseline", ok,
              f"A5 {np.mean(ours):.4f} {_fmt(ours)} vs baseline {np.mean(base):.4f} {_fmt(base)} (gap {gap:.1f} pts, "
              f">= 10); F {np.mean(f_ours):.4f} (<= 0.10) vs baseline {np.mean(f_base):.4f} (>= 0.15); "
              f"{minutes:.1f} min (< 45, includes the other two arms)")


@pytest.mark.slow
def test_criterion_06_contrastive_ablation(criterion, desk):
    with_reg, without = _final(desk, "runs", "gkcl"), _final(desk, "no_con")
    diff = 100 * (np.mean(with_reg) - np.mean(without))
    wins = sum(a > b for a, b in zip(with_reg, without))
    criterion(6, "contrastive regulariser ablation", diff >= -0.5 and wins >= 2,
              f"A5 with {np.mean(with_reg):.4f} {_fmt(with_reg)} vs without {np.mean(without):.4f} {_fmt(without)} "
              f"(diff {diff:+.1f} pts, >= -0.5; wins {wins}/3, >= 2)")


@pytest.mark.slow
def test_criterion_07_inference_coreset_size(criterion, desk):
    at20, at1 = _final(desk, "runs", "train5", 20), _final(desk, "runs", "train5", 1)
    criterion(7, "inference coreset size (trained with 5/class)", np.mean(at20) >= np.mean(at1),
              f"A5 at 20/class {np.mean(at20):.4f} {_fmt(at20)} vs at 1/class {np.mean(at1):.4f} {_fmt(at1)}")


@pytest.mark.slow
def test_criterion_08_kernel_network_ablation(criterion, desk):
    with_net, ident = _final(desk, "runs", "gkcl"), _final(desk, "runs", "identity")
    diff = 100 * (np.mean(with_net) - np.mean(ident))
    criterion(8, "kernel network vs identity", diff >= 3,
              f"A5 with f_gamma {np.mean(with_net):.4f} {_fmt(with_net)} vs identity {np.mean(ident):.4f} "
              f"{_fmt(ident)} (diff {diff:+.1f} pts, >= 3)")


@pytest.mark.slow
def test_criterion_09_cli_determinism(criterion, tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text("profile = desk\ntasks = 2\ntrain_subset = 2000\ntest_subset = 2000\niterations = 100\n",
                   encoding="utf-8")
    codes = [main(["run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d), "--quiet"])
             for d in ("a", "b")]
    a, b = ((tmp_path / d / "metrics.csv").read_bytes() for d in ("a", "b"))
    criterion(9, "identical CLI runs give byte-identical metrics.csv", codes == [0, 0] and a == b and len(a) > 0,
              f"exit codes {codes}, {len(a)} bytes, identical={a == b}")


@pytest.mark.slow
def test_criterion_10_synthetic_oracle(criterion, tmp_path):
    t0 = time.perf_counter()
    exp = harness.build_config({"profile": "desk", "stream": "synthetic", "tasks": 3, "seeds": (1,),
                                "blob_separation": 0.8})
    stream = harness.make_stream(exp, 1)
    bayes = min(stream.bayes_accuracy)
    m = run_sequence(stream, exp.train, 1)["gkcl"].matrix
    elapsed = time.perf_counter() - t0
    diag = [m.get(t, t) for t in (1, 2, 3)]
    F = average_forgetting(m)
    criterion(10, "3-task separable synthetic stream", min(diag) > 0.9 and F < 0.05 and elapsed < 120,
              f"Bayes {bayes:.4f}, diagonal {_fmt(diag)} (> 0.9), F {F:.4f} (< 0.05), {elapsed:.1f}s (< 120s)")
