import numpy as np
import pytest

from kernelbias import attacks, nnet
from kernelbias.attacks import AttackParams
from kernelbias.imgfreq import ImageTensor
from kernelbias.nnet import ModelConfig, TrainHyper, conv, dense, init_model
from helpers import FakeSample, separable_samples


def _small_model(seed=0, size=6):
    config = ModelConfig(
        layers=nnet.default_architecture(3),
        input_dims=(1, size, size),
        num_categories=2,
        flks=3,
        seed=seed,
    )
    return init_model(config)


def _trained_model(rng, size=8, n=160, epochs=8):
    samples = separable_samples(rng, n=n, size=size)
    config = ModelConfig(
        layers=nnet.default_architecture(3),
        input_dims=(1, size, size),
        num_categories=2,
        flks=3,
        seed=3,
    )
    model = nnet.train(init_model(config), samples, TrainHyper(batch_size=16, epochs=epochs))
    return model, samples


def _linear_1d_model(w_conv, b_conv, wd, bd):
    """Input (1,1,1) -> conv1x1 -> dense(2); logits are affine in the pixel."""
    config = ModelConfig(
        layers=(conv(1, 1, padding=0), dense(2)),
        input_dims=(1, 1, 1),
        num_categories=2,
        flks=1,
        seed=0,
    )
    model = init_model(config)
    weights = list(model.weights)
    weights[0] = (np.array([[[[w_conv]]]]), np.array([b_conv], dtype=np.float64))
    weights[1] = (np.array(wd, dtype=np.float64), np.array(bd, dtype=np.float64))
    return nnet.TrainedModel(config=config, weights=tuple(weights))


# ---------------------------------------------------------------------------
# perturbation_distance
# ---------------------------------------------------------------------------


def test_distance_identical_images_zero():
    img = ImageTensor(np.full((1, 4, 4), 0.5))
    assert attacks.perturbation_distance(img, img) == 0.0


def test_distance_single_pixel_unit():
    a = np.full((1, 4, 4), 0.25)
    b = a.copy()
    b[0, 2, 3] += 1.0
    assert attacks.perturbation_distance(ImageTensor(a), ImageTensor(b)) == pytest.approx(1.0)


def test_distance_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((3, 5, 7))
    b = rng.random((3, 5, 7))
    expected = 0.0
    for c in range(3):
        for y in range(5):
            for x in range(7):
                expected += (a[c, y, x] - b[c, y, x]) ** 2
    expected = expected**0.5
    got = attacks.perturbation_distance(ImageTensor(a), ImageTensor(b))
    assert abs(got - expected) < 1e-12


def test_distance_rejects_dim_mismatch():
    with pytest.raises(Exception):
        attacks.perturbation_distance(ImageTensor(np.zeros((1, 4, 4))), ImageTensor(np.zeros((1, 5, 5))))


# ---------------------------------------------------------------------------
# fgsm_attack
# ---------------------------------------------------------------------------


def test_fgsm_zero_epsilon_no_perturbation():
    rng = np.random.default_rng(1)
    model = _small_model(seed=5, size=6)
    img = rng.random((1, 6, 6))
    label = int(np.argmax(nnet.forward(model, img[np.newaxis])[0]))  # correctly classified
    sample = FakeSample(img, label, sample_id="x")
    res = attacks.fgsm_attack(model, sample, AttackParams(kind="fgsm", epsilon=0.0))
    assert not np.any(res.perturbation.values)
    assert not res.success
    assert res.d_p == 0.0


def test_fgsm_already_misclassified_succeeds_at_zero_cost():
    rng = np.random.default_rng(2)
    model = _small_model(seed=6, size=6)
    img = rng.random((1, 6, 6))
    pred = int(np.argmax(nnet.forward(model, img[np.newaxis])[0]))
    sample = FakeSample(img, 1 - pred, sample_id="x")
    res = attacks.fgsm_attack(model, sample, AttackParams(kind="fgsm", epsilon=0.0))
    assert res.success
    assert res.d_p == 0.0
    assert res.steps_used == 0


def test_fgsm_single_step_pixels_at_epsilon():
    # linear model with nonzero gradient everywhere; alpha = epsilon, one step
    model = _linear_1d_model(1.5, 0.0, [[2.0, -2.0]], [0.0, 0.0])
    sample = FakeSample(np.full((1, 1, 1), 0.5), 0, sample_id="x")
    eps = 0.05
    params = AttackParams(kind="fgsm", epsilon=eps, step_size=eps, max_steps=1)
    res = attacks.fgsm_attack(model, sample, params)
    assert np.all(np.abs(res.perturbation.values) == pytest.approx(eps))


def test_fgsm_post_attack_loss_matches_hand_computation():
    w_c, wd = 1.5, [[2.0, -2.0]]
    model = _linear_1d_model(w_c, 0.0, wd, [0.0, 0.0])
    v = 0.5
    label = 0
    sample = FakeSample(np.full((1, 1, 1), v), label, sample_id="x")
    eps = 0.05
    res = attacks.fgsm_attack(model, sample, AttackParams(kind="fgsm", epsilon=eps, step_size=eps, max_steps=1))
    # hand computation: z = (2h, -2h), h = 1.5 v; dCE/dv = (p0 - 1)*2*1.5 + p1*(-2*1.5) < 0
    # so the ascent step moves v by -eps
    v_adv = v - eps
    h = w_c * v_adv
    z = np.array([2 * h, -2 * h])
    expected_loss = float(np.log(np.sum(np.exp(z - z.max()))) - (z[label] - z.max()))
    got_loss, _, _ = nnet.loss_and_grads(model, res.perturbed.values[np.newaxis], [label])
    assert got_loss == pytest.approx(expected_loss, rel=1e-12)
    assert res.perturbed.values[0, 0, 0] == pytest.approx(v_adv)


def test_fgsm_respects_linf_budget_and_box():
    rng = np.random.default_rng(3)
    model, samples = _trained_model(rng)
    params = AttackParams(kind="fgsm", epsilon=0.1, step_size=0.01, max_steps=20)
    for sample in samples[:12]:
        res = attacks.fgsm_attack(model, sample, params)
        assert np.max(np.abs(res.perturbation.values)) <= params.epsilon + 1e-12
        assert res.perturbed.values.min() >= 0.0
        assert res.perturbed.values.max() <= 1.0
        # invariants: perturbed = clip(original + delta); d_p recomputed consistently
        assert np.array_equal(
            res.perturbed.values, np.clip(sample.image.values + res.perturbation.values, 0, 1)
        )
        assert res.d_p == pytest.approx(
            attacks.perturbation_distance(sample.image, res.perturbed), abs=1e-12
        )


def test_fgsm_success_flag_reflects_final_prediction():
    rng = np.random.default_rng(4)
    model, samples = _trained_model(rng)
    params = AttackParams(kind="fgsm", epsilon=0.3, step_size=0.03, max_steps=25)
    flips = 0
    for sample in samples[:10]:
        res = attacks.fgsm_attack(model, sample, params)
        pred = int(np.argmax(nnet.forward(model, res.perturbed.values[np.newaxis])[0]))
        assert res.success == (pred != sample.category)
        flips += res.success
    assert flips > 0  # the budget is generous enough to flip something


# ---------------------------------------------------------------------------
# cw_attack
# ---------------------------------------------------------------------------


def test_cw_already_misclassified_zero_distance():
    rng = np.random.default_rng(5)
    model = _small_model(seed=7, size=6)
    img = rng.random((1, 6, 6))
    pred = int(np.argmax(nnet.forward(model, img[np.newaxis])[0]))
    sample = FakeSample(img, 1 - pred, sample_id="x")
    res = attacks.cw_attack(model, sample, AttackParams(kind="cw"))
    assert res.success
    assert res.d_p == 0.0


def test_cw_matches_closed_form_margin_oracle():
    # margin(v) = a*w_c*v + a*b_c + c0 = 6v - 2.1: flips at v = 0.35, inside the box
    w_c, b_c = 1.5, -0.55
    wd = [[2.0, -2.0]]
    bd = [0.05, -0.05]
    model = _linear_1d_model(w_c, b_c, wd, bd)
    v = 0.6
    a = wd[0][0] - wd[0][1]
    margin = a * (w_c * v + b_c) + (bd[0] - bd[1])
    assert margin > 0
    delta_star = margin / (a * w_c)  # magnitude of the minimal flipping move
    sample = FakeSample(np.full((1, 1, 1), v), 0, sample_id="x")
    params = AttackParams(kind="cw", c_tradeoff=1.0, cw_steps=3000, cw_step_size=0.005)
    res = attacks.cw_attack(model, sample, params)
    assert res.success
    assert res.d_p == pytest.approx(delta_star, rel=0.10)


def test_cw_success_means_reevaluated_flip():
    rng = np.random.default_rng(6)
    model, samples = _trained_model(rng)
    params = AttackParams(kind="cw", cw_steps=150, cw_step_size=0.02)
    successes = 0
    for sample in samples[:8]:
        res = attacks.cw_attack(model, sample, params)
        if res.success:
            pred = int(np.argmax(nnet.forward(model, res.perturbed.values[np.newaxis])[0]))
            assert pred != sample.category
            successes += 1
        assert np.array_equal(
            res.perturbed.values, np.clip(sample.image.values + res.perturbation.values, 0, 1)
        )
    assert successes > 0


def test_cw_median_distance_below_fgsm():
    rng = np.random.default_rng(7)
    model, samples = _trained_model(rng)
    fg = AttackParams(kind="fgsm", epsilon=0.3, step_size=0.03, max_steps=30)
    cw = AttackParams(kind="cw", cw_steps=250, cw_step_size=0.02)
    cw_d, fg_d = [], []
    for sample in samples[:32]:
        rf = attacks.fgsm_attack(model, sample, fg)
        rc = attacks.cw_attack(model, sample, cw)
        if rf.success and rc.success and rf.d_p > 0:
            fg_d.append(rf.d_p)
            cw_d.append(rc.d_p)
    assert len(cw_d) >= 5
    assert np.median(cw_d) < np.median(fg_d)


def test_attacks_deterministic():
    rng = np.random.default_rng(8)
    model, samples = _trained_model(rng, n=40, epochs=3)
    sample = samples[0]
    for fn, params in (
        (attacks.fgsm_attack, AttackParams(kind="fgsm")),
        (attacks.cw_attack, AttackParams(kind="cw", cw_steps=60)),
    ):
        r1 = fn(model, sample, params)
        r2 = fn(model, sample, params)
        assert np.array_equal(r1.perturbation.values, r2.perturbation.values)
        assert r1.d_p == r2.d_p
        assert r1.success == r2.success
        assert r1.steps_used == r2.steps_used
