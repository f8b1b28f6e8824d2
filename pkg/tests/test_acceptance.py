"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -v -s tests/test_acceptance.py` to see the per-criterion
lines as they complete. Every tolerance is pinned here; the directional
experiments use fixed seed lists, so outcomes are reproducible bit for bit.
"""

import json
import math
import time

import numpy as np
import pytest

import childgrad as cg
from childgrad.datasets import DataSpec
from childgrad.fisher import empirical_fisher_diag
from childgrad.harness import MethodSpec, PretrainedSpec, RunConfig, run_training
from childgrad.masking import fisher_topk_mask, jaccard_indices
from childgrad.models import (
    ModelSpec,
    init_params,
    log_likelihood_grad,
    save_checkpoint,
)
from childgrad.optim import OptimConfig
from childgrad.tensor_core import finite_diff_grad, forward_backward
from childgrad.theory import (
    BoundInputs,
    NoiseModel,
    chi2_cdf,
    chi2_quantile,
    escape_rho_bound,
    generalization_bound,
    simulate_escape_frequency,
    simulate_update_covariance,
    masked_update_moments,
)

SEEDS = list(range(1, 11))

# the noisy-moons transfer task: a clean rotated source provides the
# pretrained weights, the unrotated noisy target with distractor columns
# provides the fine-tuning data
MOONS_MODEL = ModelSpec(input_dim=34, hidden_dims=(16, 16, 16),
                        output="classifier", num_classes=2, activation="tanh")
MOONS_TARGET = DataSpec("two_moons", {"n": 1250, "noise": 0.35,
                                      "noise_dims": 32, "noise_scale": 0.2})
MOONS_SOURCE = DataSpec("two_moons", {"n": 4000, "noise": 0.12,
                                      "noise_dims": 32, "noise_scale": 0.2,
                                      "rotate_deg": 120.0})
FINETUNE_OPTIM = OptimConfig(eta=0.03, clip_max_norm=1.0)
FINETUNE_EPOCHS = 60
FINETUNE_BATCH = 64
P_CHILD = 0.1
P_BERNOULLI = 0.3


def _criterion(num, name, ok, detail="", t0=None):
    status = "PASS" if ok else "FAIL"
    elapsed = f" [{time.perf_counter() - t0:.1f}s]" if t0 else ""
    print(f"\n[ACCEPTANCE {num:02d}] {name}: {status} {detail}{elapsed}")
    assert ok, f"criterion {num} ({name}): {detail}"


def tiny_run_config(method, seed=7, **overrides):
    base = dict(
        model=ModelSpec(input_dim=2, hidden_dims=(8,), output="classifier"),
        data=DataSpec("two_gaussians", {"n": 160, "separation": 3.0}),
        method=method,
        optim=OptimConfig(eta=0.05, clip_max_norm=1.0),
        epochs=4,
        batch_size=32,
        seed=seed,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def moons_checkpoints(tmp_path_factory):
    """Per-seed source-task checkpoints shared by criteria 8 and 9."""
    root = tmp_path_factory.mktemp("pretrained")
    paths = {}
    for seed in SEEDS:
        config = RunConfig(
            model=MOONS_MODEL, data=MOONS_SOURCE, method=MethodSpec("vanilla"),
            optim=OptimConfig(eta=0.02, clip_max_norm=1.0),
            epochs=40, batch_size=64, seed=seed + 5000)
        out = run_training(config)
        path = str(root / f"pre_{seed}.json")
        save_checkpoint(path, MOONS_MODEL, out.final_params)
        paths[seed] = path
    return paths


def finetune_config(method, seed, checkpoint, subsample_n=None):
    return RunConfig(
        model=MOONS_MODEL, data=MOONS_TARGET, method=method,
        optim=FINETUNE_OPTIM, epochs=FINETUNE_EPOCHS,
        batch_size=FINETUNE_BATCH, seed=seed,
        pretrained=PretrainedSpec("checkpoint", checkpoint),
        subsample_n=subsample_n)


def test_criterion_01_degenerate_equivalence():
    t0 = time.perf_counter()
    vanilla = run_training(tiny_run_config(MethodSpec("vanilla")))
    full_f = run_training(tiny_run_config(MethodSpec("child_f", p=1.0)))

    identical_params = np.array_equal(vanilla.final_params.data,
                                      full_f.final_params.data)
    identical_moments = (np.array_equal(vanilla.adam_state.m, full_f.adam_state.m)
                         and np.array_equal(vanilla.adam_state.v,
                                            full_f.adam_state.v))

    def trajectory(report):
        d = report.canonical_dict()
        for key in ("method", "config_hash", "mask_summary"):
            d.pop(key)
        return json.dumps(d, sort_keys=True)

    identical_reports = trajectory(vanilla.report) == trajectory(full_f.report)
    ok = identical_params and identical_moments and identical_reports
    _criterion(1, "degenerate equivalence of child_f(p=1) and vanilla", ok,
               f"params={identical_params} moments={identical_moments} "
               f"report={identical_reports}", t0)


def test_criterion_02_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(12345)
    worst = 0.0
    for trial in range(20):
        depth = int(rng.integers(1, 3))
        hidden = tuple(int(rng.integers(3, 9)) for _ in range(depth))
        spec = ModelSpec(
            input_dim=int(rng.integers(2, 6)), hidden_dims=hidden,
            output="classifier", num_classes=int(rng.integers(2, 5)),
            activation=("tanh", "relu")[int(rng.integers(0, 2))])
        params = init_params(spec, int(rng.integers(0, 1000)))
        # jitter every coordinate (zero-init biases included) so relu
        # pre-activations sit at generic points; central differences are
        # only a valid oracle away from activation kinks
        params = params.with_data(params.data
                                  + 0.1 * rng.standard_normal(len(params)))
        n = int(rng.integers(4, 11))
        batch = cg.Dataset(rng.standard_normal((n, spec.input_dim)),
                           rng.integers(0, spec.num_classes, size=n))
        _, grads = forward_backward(spec.loss_graph(), params, batch)
        fd = finite_diff_grad(spec.loss_graph(), params, batch)
        rel = np.max(np.abs(grads - fd) / (1.0 + np.abs(fd)))
        worst = max(worst, float(rel))
    ok = worst < 1e-5
    _criterion(2, "analytic gradients match finite differences", ok,
               f"worst per-coordinate relative error {worst:.3e} < 1e-5", t0)


def test_criterion_03_fisher_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    worst = 0.0
    cases = [ModelSpec(input_dim=3, hidden_dims=(), output="classifier"),
             ModelSpec(input_dim=4, hidden_dims=(6,), output="classifier",
                       num_classes=3),
             ModelSpec(input_dim=3, hidden_dims=(5, 4), output="classifier"),
             ModelSpec(input_dim=3, hidden_dims=(4,), output="regressor")]
    for i, spec in enumerate(cases):
        params = init_params(spec, i)
        n = 15
        labels = (rng.integers(0, spec.num_classes, size=n)
                  if spec.output == "classifier" else rng.standard_normal(n))
        ds = cg.Dataset(rng.standard_normal((n, spec.input_dim)), labels)
        diag = empirical_fisher_diag(spec, params, ds)
        brute = np.zeros(len(params))
        for j in range(n):
            g = log_likelihood_grad(spec, params, ds.take([j]))
            brute += g * g
        brute /= n
        worst = max(worst, float(np.max(np.abs(diag.scores - brute))))
    ok = worst < 1e-12
    _criterion(3, "empirical Fisher equals brute-force loop", ok,
               f"worst absolute deviation {worst:.3e} < 1e-12", t0)


def test_criterion_04_update_noise_statistics():
    t0 = time.perf_counter()
    trials = 100_000
    worst_rel = 0.0
    cell = 0
    for p in (0.2, 0.5, 1.0):
        for batch_size in (1, 4, 16):
            noise = NoiseModel(grad_mean=np.zeros(4), sigma_g=1.0,
                               batch_size=batch_size, p=p, eta=0.1)
            predicted = 0.1 ** 2 * 1.0 / (p * batch_size)
            rng = np.random.default_rng(10_000 + cell)
            _, emp_var = simulate_update_covariance(noise, trials, rng)
            worst_rel = max(worst_rel,
                            float(np.max(np.abs(emp_var - predicted)
                                         / predicted)))
            cell += 1
    variance_ok = worst_rel < 0.05

    g = np.array([0.5, -1.0, 0.25, 2.0])
    noise = NoiseModel(grad_mean=g, sigma_g=1.0, batch_size=4, p=0.5, eta=0.1)
    rng = np.random.default_rng(999)
    emp_mean, emp_var = simulate_update_covariance(noise, trials, rng)
    expected_mean, _ = masked_update_moments(noise)
    band = 3.0 * np.sqrt(emp_var / trials)
    mean_ok = bool(np.all(np.abs(emp_mean - expected_mean) <= band))
    ok = variance_ok and mean_ok
    _criterion(4, "update mean/variance match the closed form", ok,
               f"worst variance rel err {worst_rel:.4f} < 0.05, "
               f"mean within 3-sigma CLT band: {mean_ok}", t0)


def test_criterion_05_escape_and_generalization_bounds():
    t0 = time.perf_counter()
    round_trip_ok = True
    worst_rt = 0.0
    for k in (1, 2, 5, 10, 50):
        for x in (0.3, 1.0, 5.0, 20.0, 60.0):
            q = chi2_cdf(x, k)
            if 1e-6 < q < 1.0 - 1e-6:
                err = abs(chi2_quantile(k, q) - x)
                worst_rt = max(worst_rt, err)
                round_trip_ok = round_trip_ok and err < 1e-8

    trials = 100_000
    k, eps, delta, sigma_sq = 4, 1.0, 0.05, 1.0
    inputs = BoundInputs(epsilon=eps, delta=delta, k=k, sigma_sq=sigma_sq,
                         sigma0_sq=1.0, w=np.zeros(k), w0=np.zeros(k),
                         sample_count=1000)
    rho = escape_rho_bound(inputs)
    rng = np.random.default_rng(321)
    freq = simulate_escape_frequency(np.full(k, rho), sigma_sq, eps, trials, rng)
    budget = delta + 3.0 * math.sqrt(delta * (1 - delta) / trials)
    escape_ok = freq <= budget

    values = []
    for s2 in np.geomspace(0.05, 5.0, 10):
        values.append(generalization_bound(
            BoundInputs(epsilon=eps, delta=delta, k=k, sigma_sq=float(s2),
                        sigma0_sq=1.0, w=np.full(k, 0.3), w0=np.zeros(k),
                        sample_count=1000)))
    monotone_ok = all(a > b for a, b in zip(values, values[1:]))
    ok = round_trip_ok and escape_ok and monotone_ok
    _criterion(5, "quantile round-trip, escape budget, bound monotonicity", ok,
               f"round-trip worst {worst_rt:.2e} < 1e-8; escape {freq:.4f} <= "
               f"{budget:.4f}; bound decreasing in sigma^2: {monotone_ok}", t0)


def test_criterion_06_frozen_weights_exact():
    t0 = time.perf_counter()
    out = run_training(tiny_run_config(MethodSpec("child_d", p=0.3), epochs=6))
    child = out.fixed_mask.positive_indices
    frozen = np.setdiff1d(np.arange(len(out.final_params)), child)
    weights_ok = np.array_equal(out.final_params.data[frozen],
                                out.pretrained_params.data[frozen])
    moments_ok = (np.all(out.adam_state.m[frozen] == 0.0)
                  and np.all(out.adam_state.v[frozen] == 0.0))
    moved = not np.array_equal(out.final_params.data[child],
                               out.pretrained_params.data[child])
    ok = bool(weights_ok and moments_ok and moved)
    _criterion(6, "non-child coordinates stay exactly at w0", ok,
               f"weights exact={weights_ok} moments zero={moments_ok} "
               f"child moved={moved}", t0)


def test_criterion_07_mask_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cardinality_ok = True
    sort_ok = True
    for _ in range(100):
        n = int(rng.integers(5, 80))
        scores = np.round(rng.random(n), 2)
        p = float(rng.uniform(0.02, 1.0))
        k = math.ceil(p * n)
        mask = fisher_topk_mask(scores, [], p)
        low = cg.lowest_fisher_mask(scores, [], p)
        rand = cg.random_fixed_mask(n, [], p, rng)
        cardinality_ok &= (mask.positive_count == k
                           and low.positive_count == k
                           and rand.positive_count == k)
        oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
        sort_ok &= set(mask.positive_indices.tolist()) == set(oracle)

    jaccard_ok = True
    for _ in range(100):
        n = int(rng.integers(4, 50))
        a_idx = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
        b_idx = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
        j_ab = jaccard_indices(a_idx, b_idx)
        j_ba = jaccard_indices(b_idx, a_idx)
        jaccard_ok &= j_ab == j_ba
        jaccard_ok &= jaccard_indices(a_idx, a_idx) == 1.0
        disjoint = set(a_idx.tolist()).isdisjoint(b_idx.tolist())
        jaccard_ok &= (j_ab == 0.0) == disjoint
    ok = bool(cardinality_ok and sort_ok and jaccard_ok)
    _criterion(7, "mask cardinality, sort oracle, Jaccard properties", ok,
               f"cardinality={cardinality_ok} sort={sort_ok} "
               f"jaccard={jaccard_ok}", t0)


def test_criterion_08_ablation_ordering(moons_checkpoints):
    t0 = time.perf_counter()
    methods = {
        "vanilla": MethodSpec("vanilla"),
        "child_d": MethodSpec("child_d", p=P_CHILD),
        "random_d": MethodSpec("random_d", p=P_CHILD),
        "lowest_d": MethodSpec("lowest_d", p=P_CHILD),
        "prune_d": MethodSpec("prune_d", p=P_CHILD),
    }
    accs = {name: [] for name in methods}
    for seed in SEEDS:
        for name, method in methods.items():
            out = run_training(finetune_config(method, seed,
                                               moons_checkpoints[seed]))
            accs[name].append(out.report.final_metrics["eval"])
    means = {name: float(np.mean(v)) for name, v in accs.items()}
    gaps = {
        "child_d-random_d": means["child_d"] - means["random_d"],
        "random_d-vanilla": means["random_d"] - means["vanilla"],
        "child_d-lowest_d": means["child_d"] - means["lowest_d"],
        "child_d-prune_d": means["child_d"] - means["prune_d"],
    }
    ok = all(v > 0 for v in gaps.values())
    detail = " ".join(f"{k}={v:+.4f}" for k, v in gaps.items())
    _criterion(8, "ablation ordering on noisy moons", ok,
               detail + "  means: " + " ".join(f"{k}={v:.4f}"
                                               for k, v in means.items()), t0)


def test_criterion_09_low_resource_gains(moons_checkpoints):
    t0 = time.perf_counter()
    methods = {
        "vanilla": MethodSpec("vanilla"),
        "child_d": MethodSpec("child_d", p=P_CHILD),
        "child_f": MethodSpec("child_f", p=P_BERNOULLI),
    }
    accs = {name: [] for name in methods}
    for seed in SEEDS:
        for name, method in methods.items():
            out = run_training(finetune_config(method, seed,
                                               moons_checkpoints[seed],
                                               subsample_n=100))
            accs[name].append(out.report.final_metrics["eval"])
    means = {name: float(np.mean(v)) for name, v in accs.items()}
    gap_d = means["child_d"] - means["vanilla"]
    gap_f = means["child_f"] - means["vanilla"]
    ok = gap_d >= 0 and gap_f >= 0
    _criterion(9, "100-example subsample favors masked variants", ok,
               f"child_d-vanilla={gap_d:+.4f} child_f-vanilla={gap_f:+.4f}",
               t0)


def test_criterion_10_flatness_trend():
    t0 = time.perf_counter()
    model = ModelSpec(input_dim=2, hidden_dims=(16,), output="classifier",
                      num_classes=2, activation="tanh")
    data = DataSpec("two_gaussians", {"n": 500, "d": 2, "separation": 2.0})
    p_grid = (1.0, 0.4, 0.2)
    sharpness = {p: [] for p in p_grid}
    for seed in SEEDS:
        for p in p_grid:
            config = RunConfig(
                model=model, data=data, method=MethodSpec("child_f", p=p),
                optim=OptimConfig(eta=0.02, clip_max_norm=1.0,
                                  weight_decay=0.5),
                epochs=150, batch_size=8, seed=seed, sharpness_iters=30)
            out = run_training(config)
            sharpness[p].append(out.report.sharpness)
    means = [float(np.mean(sharpness[p])) for p in p_grid]
    ok = all(a >= b for a, b in zip(means, means[1:]))
    _criterion(10, "sharpness non-increasing as p_F shrinks", ok,
               "mean rho at p=(1.0, 0.4, 0.2): "
               + " >= ".join(f"{m:.4f}" for m in means), t0)


def test_criterion_11_mask_overlap_tracks_task_similarity():
    t0 = time.perf_counter()
    p_d = 0.3
    similar, different = [], []
    for seed in range(1, 6):
        cls_spec = ModelSpec(input_dim=2, hidden_dims=(16,),
                             output="classifier", num_classes=2)
        reg_spec = ModelSpec(input_dim=2, hidden_dims=(16,),
                             output="regressor")
        w0_cls = init_params(cls_spec, seed)
        w0_reg = init_params(reg_spec, seed)
        n_backbone = int(cls_spec.head_indices().min())
        assert np.array_equal(w0_cls.data[:n_backbone],
                              w0_reg.data[:n_backbone])

        gauss = lambda s: cg.make_dataset(
            DataSpec("two_gaussians", {"n": 500, "d": 2, "separation": 2.5}),
            s).train
        regression = cg.make_dataset(
            DataSpec("linear_regression", {"n": 500, "d": 2, "noise": 0.3}),
            seed + 300).train

        mask_a = fisher_topk_mask(
            empirical_fisher_diag(cls_spec, w0_cls, gauss(seed + 100)),
            cls_spec.head_indices(), p_d)
        mask_b = fisher_topk_mask(
            empirical_fisher_diag(cls_spec, w0_cls, gauss(seed + 200)),
            cls_spec.head_indices(), p_d)
        mask_r = fisher_topk_mask(
            empirical_fisher_diag(reg_spec, w0_reg, regression),
            reg_spec.head_indices(), p_d)

        backbone = lambda m: m.positive_indices[m.positive_indices < n_backbone]
        similar.append(jaccard_indices(backbone(mask_a), backbone(mask_b)))
        different.append(jaccard_indices(backbone(mask_a), backbone(mask_r)))
    mean_similar = float(np.mean(similar))
    mean_different = float(np.mean(different))
    ok = mean_similar > mean_different
    _criterion(11, "similar tasks share more of the child network", ok,
               f"same-generator overlap {mean_similar:.4f} > "
               f"cross-task overlap {mean_different:.4f}", t0)
