"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured values. The pipeline criteria (8-10) share a module-scoped run
of the full CLI pipeline on the frequency-differentiated synthetic dataset
and repeat it for the determinism check.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from kernelbias import attacks, causal, dataset, harness, imgfreq, nnet
from kernelbias.attacks import AttackParams
from kernelbias.causal import Observation
from kernelbias.dataset import GroupSpec, SynthSpec
from kernelbias.nnet import ModelConfig, TrainHyper, conv, default_architecture, dense, init_model, maxpool, relu
from oracles import naive_dft2_centered, normal_equation_fit


def _report(name: str, detail: str):
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# 1. FFT correctness
# ---------------------------------------------------------------------------


def test_criterion_1_fft_correctness():
    start = time.time()
    rng = np.random.default_rng(101)
    worst_oracle = worst_roundtrip = worst_parseval = 0.0
    for trial in range(3):
        img = imgfreq.ImageTensor(rng.random((1, 8, 8)))
        spec = imgfreq.dft2(img)
        oracle = naive_dft2_centered(img.values[0])
        worst_oracle = max(worst_oracle, float(np.max(np.abs(spec.coeffs - oracle))))
        back = imgfreq.idft2(spec)
        worst_roundtrip = max(worst_roundtrip, float(np.max(np.abs(back.values - img.values))))
        pixel_power = float(np.sum(img.values[0] ** 2))
        worst_parseval = max(
            worst_parseval, abs(pixel_power - spec.total_power() / 64) / pixel_power
        )
    elapsed = time.time() - start
    assert worst_oracle < 1e-9
    assert worst_roundtrip < 1e-10
    assert worst_parseval < 1e-9
    assert elapsed < 1.0
    _report("1 (FFT correctness)",
            f"oracle {worst_oracle:.2e}, roundtrip {worst_roundtrip:.2e}, "
            f"parseval {worst_parseval:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. Injection exactness
# ---------------------------------------------------------------------------


def test_criterion_2_injection_exactness():
    rng = np.random.default_rng(102)
    img = imgfreq.ImageTensor(rng.random((1, 64, 64)))
    res = imgfreq.inject_energy(img, r0=10, delta_width=2, delta_gain=15)
    mask = imgfreq.annulus_mask(64, 64, 10, 2)
    s_in = imgfreq.dft2(img)
    s_mod = imgfreq.inject_energy_spectrum(s_in, 10, 2, 15)
    p_in = float(np.sum(np.abs(s_in.coeffs[mask]) ** 2))
    p_out = float(np.sum(np.abs(s_mod.coeffs[mask]) ** 2))
    ratio_err = abs(p_out - 256.0 * p_in) / (256.0 * p_in)
    assert ratio_err < 1e-9
    assert np.array_equal(s_mod.coeffs[~mask], s_in.coeffs[~mask])
    raw = imgfreq._idft2_raw(imgfreq._uncenter(s_mod.coeffs))
    residue = float(np.max(np.abs(raw.imag)))
    assert residue < 1e-8
    # the pre-clip image in the public result is that inverse transform
    assert np.array_equal(res.pre_clip.values[0], raw.real)
    _report("2 (injection exactness)",
            f"power ratio err {ratio_err:.2e}, non-annulus bit-identical, imag residue {residue:.2e}")


# ---------------------------------------------------------------------------
# 3. Gradient correctness
# ---------------------------------------------------------------------------


def _max_grad_error(model, x, labels, n_param_checks=40, n_input_checks=5, rng=None):
    loss0, pgrads, igrads = nnet.loss_and_grads(model, x, labels)
    step = 1e-5
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for li, slot in enumerate(model.weights):
        if slot is None:
            continue
        for arr, grad in zip(slot, pgrads[li]):
            flat, gflat = arr.ravel(), grad.ravel()
            count = min(n_param_checks, flat.size)
            for idx in rng.choice(flat.size, size=count, replace=False):
                orig = flat[idx]
                flat[idx] = orig + step
                hi, _, _ = nnet.loss_and_grads(model, x, labels)
                flat[idx] = orig - step
                lo, _, _ = nnet.loss_and_grads(model, x, labels)
                flat[idx] = orig
                fd = (hi - lo) / (2 * step)
                worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-4))
    flat, gflat = x.ravel(), igrads.ravel()
    for idx in rng.choice(flat.size, size=n_input_checks, replace=False):
        orig = flat[idx]
        flat[idx] = orig + step
        hi, _, _ = nnet.loss_and_grads(model, x, labels)
        flat[idx] = orig - step
        lo, _, _ = nnet.loss_and_grads(model, x, labels)
        flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-4))
    return worst


def test_criterion_3_gradient_correctness():
    start = time.time()
    rng = np.random.default_rng(103)
    architectures = [
        ModelConfig(layers=(conv(2, 3), relu(), maxpool(2), dense(2)),
                    input_dims=(1, 8, 8), num_categories=2, flks=3, seed=31),
        ModelConfig(layers=(conv(2, 7), relu(), maxpool(2), conv(3, 3), relu(), dense(3)),
                    input_dims=(1, 10, 10), num_categories=3, flks=7, seed=32),
        ModelConfig(layers=(conv(2, 5, stride=2, padding=2), relu(), dense(2)),
                    input_dims=(2, 9, 9), num_categories=2, flks=5, seed=33),
    ]
    worst = 0.0
    for config in architectures:
        model = init_model(config)
        x = rng.random((2,) + tuple(config.input_dims))
        labels = list(rng.integers(config.num_categories, size=2))
        worst = max(worst, _max_grad_error(model, x, labels, rng=rng))
    elapsed = time.time() - start
    assert worst < 1e-4
    assert elapsed < 30.0
    _report("3 (gradient correctness)", f"worst relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. Training sanity (+ feeds criterion 10)
# ---------------------------------------------------------------------------


def _separable_spec(seed=0):
    return SynthSpec(
        groups={
            "A": GroupSpec(count=500, signal_band=(0.16, 0.22), signal_amplitude=0.14),
            "B": GroupSpec(count=500, signal_band=(0.04, 0.08), signal_amplitude=0.14),
        },
        image_size=32,
        seed=seed,
    )


def _train_default_cnn():
    samples = dataset.generate_synthetic(_separable_spec())
    train_s, test_s = dataset.split(samples, 0.8, seed=1)
    config = ModelConfig(
        layers=default_architecture(3),
        input_dims=(1, 32, 32),
        num_categories=2,
        flks=3,
        init_variance=0.002,
        seed=4,
    )
    model = nnet.train(init_model(config), train_s, TrainHyper(epochs=20))
    return model, train_s, test_s


@pytest.fixture(scope="module")
def trained_default():
    start = time.time()
    model, train_s, test_s = _train_default_cnn()
    return model, test_s, time.time() - start


def test_criterion_4_training_sanity(trained_default):
    model, test_s, elapsed = trained_default
    table = nnet.evaluate_by_group(model, test_s)
    assert table.overall.accuracy >= 0.95
    assert elapsed < 60.0
    _report("4 (training sanity)",
            f"test accuracy {table.overall.accuracy:.3f} in {elapsed:.1f}s / 20 epochs")


# ---------------------------------------------------------------------------
# 5. Attack contracts
# ---------------------------------------------------------------------------


def test_criterion_5_attack_contracts(trained_default):
    model, test_s, _ = trained_default
    fg = AttackParams(kind="fgsm", epsilon=0.1, step_size=0.01, max_steps=20)
    cw = AttackParams(kind="cw", cw_steps=250, cw_step_size=0.02)
    preds = nnet.predict(model, np.stack([s.image.values for s in test_s]))
    correct = [s for s, p in zip(test_s, preds) if p == s.category]
    assert len(correct) >= 100
    fgsm_success = 0
    joint_fg, joint_cw = [], []
    for sample in correct:
        rf = attacks.fgsm_attack(model, sample, fg)
        assert np.max(np.abs(rf.perturbation.values)) <= fg.epsilon + 1e-12
        assert rf.perturbed.values.min() >= 0.0 and rf.perturbed.values.max() <= 1.0
        rc = attacks.cw_attack(model, sample, cw)
        if rf.success:
            fgsm_success += 1
        if rf.success and rc.success:
            joint_fg.append(rf.d_p)
            joint_cw.append(rc.d_p)
    rate = fgsm_success / len(correct)
    assert rate >= 0.80
    assert len(joint_cw) >= 20
    med_cw, med_fg = float(np.median(joint_cw)), float(np.median(joint_fg))
    assert med_cw < med_fg
    _report("5 (attack contracts)",
            f"FGSM success {rate:.2f} on {len(correct)} correct samples; "
            f"median d_p CW {med_cw:.3f} < FGSM {med_fg:.3f} on {len(joint_cw)} joint successes")


# ---------------------------------------------------------------------------
# 6. OLS correctness
# ---------------------------------------------------------------------------


def test_criterion_6_ols_correctness():
    start = time.time()
    rng = np.random.default_rng(106)
    worst_beta = 0.0
    for _ in range(20):
        n, k = int(rng.integers(40, 120)), int(rng.integers(2, 6))
        x = rng.standard_normal((n, k)) + 0.5
        y = x @ rng.standard_normal(k) + 0.1 * rng.standard_normal(n)
        design = causal.DesignMatrix(x, y, tuple(f"c{i}" for i in range(k)))
        fit = causal.ols_fit(design)
        expected = normal_equation_fit(x, y)
        worst_beta = max(worst_beta, float(np.max(np.abs(fit.beta_hat - expected))))
    assert worst_beta < 1e-8

    # F(1, d) = t(d)^2 identity on the distribution functions
    worst_ft = 0.0
    for f in (0.3, 1.7, 4.96, 11.2):
        for d in (5, 10, 30, 200):
            p_f = causal.f_dist_p(f, 1, d)
            p_t = causal.t_dist_p(np.sqrt(f), d)
            worst_ft = max(worst_ft, abs(p_f - p_t))
    assert worst_ft < 1e-10

    rng = np.random.default_rng(314)
    rejections = 0
    reps = 200
    for _ in range(reps):
        obs = []
        for i in range(60):
            g = "a" if i % 2 else "b"
            x_val = float(3 + 2 * (i % 5))
            obs.append(Observation(x=x_val, y=0.02 * x_val + 0.05 * rng.standard_normal(),
                                   attributes={"group": g}))
        fit = causal.ols_fit(causal.build_design(obs, protected=("group",)))
        if causal.pairwise_f_test(fit, "beta_a", "beta_b").p_value < 0.05:
            rejections += 1
    rate = rejections / reps
    elapsed = time.time() - start
    assert 0.02 <= rate <= 0.09
    assert elapsed < 60.0
    _report("6 (OLS correctness)",
            f"beta vs normal equations {worst_beta:.2e}, |F-t^2| {worst_ft:.2e}, "
            f"null rejection rate {rate:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. Constructed-effect recovery
# ---------------------------------------------------------------------------


def test_criterion_7_constructed_effect_recovery(tmp_path):
    rejections = 0
    worst_err = 0.0
    for trial in range(10):
        rng = np.random.default_rng(700 + trial)
        rows = []
        i = 0
        for flks in (3, 5, 7, 9, 11):
            for group, slope in (("A", 0.01), ("B", 0.03)):
                for _ in range(200):
                    y = slope * flks + 0.005 * rng.standard_normal()
                    rows.append([f"s{i}", "cw", flks, 0, group, 1, y, 10, 0.1, 1])
                    i += 1
        out = tmp_path / f"trial{trial}"
        out.mkdir()
        harness._write_csv(
            out / "attack_records.csv",
            ["sample_id", "attack_kind", "flks", "seed", "subgroup",
             "success", "d_p", "steps_used", "f_half", "initially_correct"],
            rows,
        )
        config = harness.ExperimentConfig(groups={"g": GroupSpec(count=1, signal_band=(0.1, 0.2))})
        harness.cmd_regress(config, out, mode="distance")
        _, coef_rows = harness.read_csv(out / "regress" / "distance_unfiltered_coef.csv")
        coefs = {r[0]: float(r[1]) for r in coef_rows}
        worst_err = max(worst_err, abs(coefs["beta_A"] - 0.01), abs(coefs["beta_B"] - 0.03))
        assert abs(coefs["beta_A"] - 0.01) <= 0.002
        assert abs(coefs["beta_B"] - 0.03) <= 0.002
        _, f_rows = harness.read_csv(out / "regress" / "distance_unfiltered_ftests.csv")
        p = min(float(r[4]) for r in f_rows if "beta_A" in r[0] and "beta_B" in r[0])
        if p < 0.05:
            rejections += 1
    assert rejections >= 9
    _report("7 (constructed-effect recovery)",
            f"worst |beta err| {worst_err:.2e}, F-test rejections {rejections}/10")


# ---------------------------------------------------------------------------
# 8-10. Full pipeline on the frequency-differentiated dataset
# ---------------------------------------------------------------------------

PIPELINE_CONFIG = """\
[dataset]
image_size = 32
seed = 0
train_fraction = 0.8
split_seed = 1

[group:A]
count = 500
signal_band = 0.20, 0.26
signal_amplitude = 0.10
texture_band = 0.17, 0.48
texture_amplitude = 0.24
noise_std = 0.003

[group:B]
count = 500
signal_band = 0.08, 0.12
signal_amplitude = 0.10
texture_band = 0.01, 0.16
texture_amplitude = 0.24
noise_std = 0.003

[sweep]
flks = 3, 7, 11
seeds_per_setting = 3
init_variance = 0.002

[train]
batch_size = 32
lr = 1e-3
lr_decay_epochs = 38, 45
lr_decay_factor = 0.1
epochs = 50
optimizer = adam

[attack]
kind = cw
cw_steps = 200
cw_step_size = 0.02

[inject]
frequencies = 0.10, 0.23
delta_width = 2
delta_gain = 15

[regress]
protected = group
controls =
bands = 0.07:0.13, 0.19:0.27
"""

OWN_PROBE = {"A": 0.23, "B": 0.10}
FAR_PROBE = {"A": 0.10, "B": 0.23}
PIPELINE_FLKS = (3, 7, 11)


@pytest.fixture(scope="module")
def pipeline8(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("accept_pipeline")
    cfg = tmp / "cfg.ini"
    cfg.write_text(PIPELINE_CONFIG)
    out = tmp / "run1"
    start = time.time()
    for verb in ("train-sweep", "attack", "inject-sweep", "regress", "report"):
        code = harness.main([verb, "--config", str(cfg), "--out", str(out)])
        assert code == 0, f"{verb} failed"
    elapsed = time.time() - start
    return cfg, out, elapsed


def _summary_by_group(out: Path):
    header, rows = harness.read_csv(out / "attack_summary.csv")
    col = {n: i for i, n in enumerate(header)}
    table = {}
    for row in rows:
        if row[col["attack_kind"]] != "cw":
            continue
        key = (int(row[col["flks"]]), row[col["group"]])
        table[key] = {
            "f_half_median": float(row[col["f_half_median"]]),
            "median_dp_success": float(row[col["median_dp_success"]]),
            "n": int(row[col["n"]]),
        }
    return table


def test_criterion_8_qualitative_trends(pipeline8):
    _, out, elapsed = pipeline8
    table = _summary_by_group(out)
    pairs = [(3, 7), (7, 11), (3, 11)]

    # (a) median adversarial-perturbation f0.5 non-increasing in >= 2 of 3 comparisons
    for group in ("A", "B"):
        med = {k: table[(k, group)]["f_half_median"] for k in PIPELINE_FLKS}
        non_increasing = sum(1 for i, j in pairs if med[j] <= med[i])
        assert non_increasing >= 2, f"(a) {group}: medians {med}"

    # (b) group A's median f0.5 exceeds group B's at every FLKS
    for k in PIPELINE_FLKS:
        a, b = table[(k, "A")]["f_half_median"], table[(k, "B")]["f_half_median"]
        assert a > b, f"(b) flks={k}: A {a} vs B {b}"

    # (c) median d_p non-decreasing in FLKS per group
    for group in ("A", "B"):
        dp = [table[(k, group)]["median_dp_success"] for k in PIPELINE_FLKS]
        assert dp[0] <= dp[1] <= dp[2], f"(c) {group}: {dp}"

    assert elapsed < 30 * 60
    detail = "; ".join(
        f"{g}: f05 {[table[(k, g)]['f_half_median'] for k in PIPELINE_FLKS]} "
        f"dp {[round(table[(k, g)]['median_dp_success'], 3) for k in PIPELINE_FLKS]}"
        for g in ("A", "B")
    )
    _report("8 (qualitative trends)", f"{detail}; pipeline {elapsed/60:.1f} min")


def test_criterion_9_injection_sweep_shape(pipeline8):
    _, out, _ = pipeline8
    header, rows = harness.read_csv(out / "inject_accuracy.csv")
    col = {n: i for i, n in enumerate(header)}
    inj = {
        (int(r[col["flks"]]), r[col["group"]], float(r[col["frequency"]])): float(r[col["accuracy"]])
        for r in rows
    }
    bheader, brows = harness.read_csv(out / "accuracy_unperturbed.csv")
    bcol = {n: i for i, n in enumerate(bheader)}
    clean = {
        (int(r[bcol["flks"]]), r[bcol["group"]]): float(r[bcol["accuracy"]])
        for r in brows if r[bcol["group"]] != "overall"
    }
    details = []
    for k in PIPELINE_FLKS:
        for group in ("A", "B"):
            own_drop = clean[(k, group)] - inj[(k, group, OWN_PROBE[group])]
            far_drop = clean[(k, group)] - inj[(k, group, FAR_PROBE[group])]
            assert own_drop >= 0.10, f"flks={k} {group}: own-band drop {own_drop:.3f} < 0.10"
            assert far_drop < 0.05, f"flks={k} {group}: far-band drop {far_drop:.3f} >= 0.05"
            details.append(f"flks{k}/{group}: own {own_drop:.2f} far {far_drop:.2f}")
    _report("9 (injection sweep shape)", "; ".join(details))


def test_criterion_10_determinism(pipeline8, trained_default, tmp_path):
    cfg, out, _ = pipeline8
    # criterion 4 repeat: retraining the default CNN gives bit-identical weights
    model_a, _, _ = trained_default
    model_b, _, _ = _train_default_cnn()
    ckpt_a, ckpt_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nnet.save_checkpoint(model_a, ckpt_a)
    nnet.save_checkpoint(model_b, ckpt_b)
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()

    # criterion 8 repeat: the full pipeline reproduces checkpoints and CSVs byte for byte
    out2 = tmp_path / "run2"
    for verb in ("train-sweep", "attack", "inject-sweep", "regress", "report"):
        code = harness.main([verb, "--config", str(cfg), "--out", str(out2)])
        assert code == 0, f"{verb} rerun failed"
    compared = 0
    for first in sorted(out.rglob("*")):
        if not first.is_file():
            continue
        rel = first.relative_to(out)
        second = out2 / rel
        assert second.exists(), f"missing {rel} in rerun"
        assert first.read_bytes() == second.read_bytes(), f"{rel} differs between reruns"
        compared += 1
    assert compared > 10
    _report("10 (determinism)",
            f"criterion-4 checkpoints identical; {compared} pipeline artifacts byte-identical")
