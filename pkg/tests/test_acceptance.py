"""End-to-end acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary.  The reference
experiment (six modes, five seeds, 150 epochs) is shared by criteria 5-8
and takes several minutes on one core.
"""

import filecmp
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gpda import autodiff as ad
from gpda.autodiff import Tensor
from gpda.cli import ExperimentSpec, IdxTask, SyntheticTask, run_experiment
from gpda.data import Shift, gen_synthetic_pda
from gpda.graph import LabelKind, NodeLabels, build_adjacency
from gpda.losses import CentroidBank, ClassWeights, loss_centroid_separation, loss_domain, loss_source
from gpda.models import GcnHead, gcn_forward
from gpda.training import TrainConfig, new_state, objective

from conftest import ACCEPTANCE_LINES, central_difference, max_rel_error

REFERENCE_TASK = SyntheticTask(
    num_classes=6, num_shared=3, per_class=200, rotation_deg=25.0, translation=(1.5, 0.0), noise=0.6
)
REFERENCE_CONFIG = TrainConfig(epochs=150, batch_size=32, lr=0.05)
MODES = ("gpda", "source_only", "dann_like", "no_cs", "no_graph", "baseline")
SEEDS = (0, 1, 2, 3, 4)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ------------------------------------------------------------------ gradients


def test_c1_full_objective_gradients():
    start = time.perf_counter()
    task = gen_synthetic_pda(6, 3, 20, Shift(25.0, (1.5, 0.0), 0.6), seed=0)
    # Low threshold so target rows receive pseudo-labels and the separation term is live.
    cfg = TrainConfig(feature_sizes=(8, 8), gcn_sizes=(8, 8, 8), disc_hidden=(4,),
                      threshold=0.2, lambda1=0.7, lambda2=0.3)
    models = new_state(cfg, task, 1).models
    models.fit_input_scaling(task.source.samples)
    rng = np.random.default_rng(11)
    src_idx = np.array([rng.choice(np.flatnonzero(task.source.labels == k)) for k in range(6)])
    tgt_idx = rng.choice(len(task.target), 6, replace=False)
    xs, ys, xt = task.source.samples[src_idx], task.source.labels[src_idx], task.target.samples[tgt_idx]
    bank = CentroidBank(Tensor(0.3 * rng.standard_normal((6, 8))), Tensor(0.3 * rng.standard_normal((6, 8))),
                        np.ones(6, bool), np.ones(6, bool), 0.7)
    gamma = ClassWeights(np.array([1.0, 0.8, 0.9, 0.2, 0.1, 0.3]))
    coeff, offset = 0.6, 2

    def terms():
        return objective(models, cfg, xs, ys, xt, gamma, bank, coeff, offset)[0].values()

    parts = objective(models, cfg, xs, ys, xt, gamma, bank, coeff, offset)[0]
    assert all(abs(v) > 0 for v in parts.values().values()), "every term must be active"
    params = models.parameters()
    ad.zero_grads(params)
    ad.backward(parts.total)

    # The discriminator descends the objective.  Below the reversal layer the
    # extractor and graph head see the domain term with sign -coeff.
    worst = 0.0
    for name, p in models.named_parameters():
        if name.split(".")[0] in ("E", "G"):
            main = central_difference(lambda: (lambda v: v["total"] - cfg.lambda1 * v["L_D"])(terms()), p)
            dom = central_difference(lambda: terms()["L_D"], p)
            numeric = main - coeff * cfg.lambda1 * dom
        else:
            numeric = central_difference(lambda: terms()["total"], p)
        worst = max(worst, max_rel_error(p.grad, numeric))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    report(1, ok, f"max relative gradient error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


# ------------------------------------------------------------------ graph


def random_labels(rng, n, c):
    kinds = rng.integers(0, 3, n)
    rows = np.zeros((n, c))
    for i, kind in enumerate(kinds):
        if kind != LabelKind.UNLABELED:
            rows[i, rng.integers(0, c)] = 1.0
    return NodeLabels(rows, kinds)


def dense_propagation(y):
    a_tilde = y @ y.T + np.eye(len(y))
    d_inv_sqrt = np.diag(1.0 / np.sqrt(a_tilde.sum(axis=1)))
    return d_inv_sqrt @ a_tilde @ d_inv_sqrt


def test_c2_gcn_matches_dense_oracle():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, c = int(rng.integers(1, 21)), int(rng.integers(2, 7))
        widths = tuple(int(w) for w in rng.integers(1, 9, int(rng.integers(2, 4))))
        labels = random_labels(rng, n, c)
        x = rng.standard_normal((n, widths[0]))
        head = GcnHead(widths, rng)
        got = gcn_forward(head, Tensor(x), build_adjacency(labels)).values
        p = dense_propagation(labels.rows)
        h = x
        for i, theta in enumerate(head.filters):
            h = p @ h @ theta.values
            if i < len(head.filters) - 1:
                h = np.maximum(h, 0.0)
        worst = max(worst, float(np.max(np.abs(got - h))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 5
    report(2, ok, f"max |gcn - dense| {worst:.1e} (<= 1e-12) over 200 instances, {elapsed:.2f}s (< 5s)")
    assert ok


def test_c3_adjacency_properties():
    rng = np.random.default_rng(3)
    sym_a, sym_p, equi = 0.0, 0.0, 0.0
    for _ in range(500):
        n, c = int(rng.integers(1, 25)), int(rng.integers(2, 8))
        labels = random_labels(rng, n, c)
        g = build_adjacency(labels)
        sym_a = max(sym_a, float(np.max(np.abs(g.adjacency - g.adjacency.T))))
        sym_p = max(sym_p, float(np.max(np.abs(g.propagation - g.propagation.T))))
        perm = rng.permutation(n)
        gp = build_adjacency(NodeLabels(labels.rows[perm], labels.kinds[perm]))
        equi = max(equi, float(np.max(np.abs(gp.propagation - g.propagation[np.ix_(perm, perm)]))))
    ok = sym_a == 0.0 and sym_p <= 1e-12 and equi <= 1e-12
    report(3, ok, f"500 label sets: |A-A^T| {sym_a:.1e}, |P-P^T| {sym_p:.1e}, permutation gap {equi:.1e}")
    assert ok


# ------------------------------------------------------------------ losses


def test_c4_loss_unit_values():
    ce = loss_source(Tensor(np.zeros((4, 10))), np.eye(10)[[0, 3, 5, 9]]).item()
    bce = loss_domain(Tensor(np.full((8, 1), 0.5)), [1, 1, 1, 1, 0, 0, 0, 0], np.ones(8)).item()
    bank = CentroidBank(Tensor([[0.0, 0.0], [0.0, 1.0]]), Tensor([[0.0, 0.0], [1.0, 0.0]]),
                        np.ones(2, bool), np.ones(2, bool))
    sep = loss_centroid_separation(bank, 1).item()
    ok = abs(ce - np.log(10)) <= 1e-12 and abs(bce - 2 * np.log(2)) <= 1e-12 and sep == -2.0
    report(4, ok, f"CE {ce!r} vs ln10, BCE {bce!r} vs 2ln2, separation {sep!r} vs -2")
    assert ok


# ------------------------------------------------------------------ reference experiment


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    summary, timings = {}, {}
    for mode in MODES:
        start = time.perf_counter()
        rows, results = run_experiment(
            ExperimentSpec(REFERENCE_TASK, REFERENCE_CONFIG, (mode,), SEEDS, str(out / mode))
        )
        timings[mode] = time.perf_counter() - start
        summary[mode] = (rows[0], results)
    return out, summary, timings


@pytest.mark.slow
def test_c5_gamma_separates_outliers(reference):
    _, summary, timings = reference
    task = REFERENCE_TASK.build()
    shared, outlier = list(task.shared), list(task.outlier)
    row, _ = summary["gpda"]
    ratios = [float(g[outlier].mean() / g[shared].mean()) for g in row.final_gammas]
    passing = sum(r < 0.5 for r in ratios)
    ok = len(ratios) == 5 and passing >= 4 and timings["gpda"] < 600
    report(5, ok, f"outlier/shared gamma ratios {np.round(ratios, 3).tolist()}, {passing}/5 below 0.5 "
                  f"(need 4), {timings['gpda']:.0f}s (< 600s)")
    assert ok


@pytest.mark.slow
def test_c6_method_ordering(reference):
    _, summary, timings = reference
    gpda, src, dann = (summary[m][0].mean for m in ("gpda", "source_only", "dann_like"))
    elapsed = sum(timings[m] for m in ("gpda", "source_only", "dann_like"))
    ok = gpda >= src + 0.05 and gpda >= dann + 0.05 and elapsed < 1800
    report(6, ok, f"gpda {100 * gpda:.2f}, source_only {100 * src:.2f}, dann_like {100 * dann:.2f} "
                  f"(need gpda >= both + 5 points), {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c7_ablation_ordering(reference):
    _, summary, _ = reference
    acc = {m: summary[m][0].mean for m in ("gpda", "no_cs", "no_graph", "baseline")}
    middle = max(acc["no_cs"], acc["no_graph"])
    ok = acc["gpda"] >= middle - 0.01 and middle >= acc["baseline"] - 0.01
    detail = ", ".join(f"{m} {100 * v:.2f}" for m, v in acc.items())
    report(7, ok, f"{detail} (need gpda >= max(no_cs, no_graph) >= baseline within 1 point)")
    assert ok


@pytest.mark.slow
def test_c8_repeat_is_byte_identical(reference, tmp_path):
    out, _, _ = reference
    run_experiment(ExperimentSpec(REFERENCE_TASK, REFERENCE_CONFIG, ("gpda",), SEEDS, str(tmp_path)))
    names = sorted(p.name for p in (out / "gpda").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(out / "gpda", tmp_path, names, shallow=False)
    ok = bool(names) and not mismatch and not errors
    report(8, ok, f"{len(match)}/{len(names)} metric CSVs byte-identical on a repeated gpda run")
    assert ok


# ------------------------------------------------------------------ optional digits run


DIGITS = os.environ.get("GPDA_DIGITS_DIR")


@pytest.mark.slow
@pytest.mark.skipif(not DIGITS, reason="set GPDA_DIGITS_DIR to a folder with MNIST and USPS IDX files")
def test_c9_mnist_to_usps(tmp_path):
    root = Path(DIGITS)
    task = IdxTask(
        str(root / "mnist-images.idx"), str(root / "mnist-labels.idx"),
        str(root / "usps-images.idx"), str(root / "usps-labels.idx"),
        keep=(0, 1, 2, 3, 4), num_classes=10, side=28,
    )
    rows, _ = run_experiment(ExperimentSpec(task, TrainConfig(epochs=30), ("gpda", "dann_like", "source_only"),
                                            (0,), str(tmp_path)))
    acc = {r.mode: r.mean for r in rows}
    ok = acc["gpda"] > acc["dann_like"] and acc["gpda"] > acc["source_only"]
    report(9, ok, ", ".join(f"{m} {100 * v:.2f}" for m, v in acc.items()) + " (optional)")
    assert ok
