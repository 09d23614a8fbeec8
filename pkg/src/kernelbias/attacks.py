"""Input-space adversarial perturbation generators and the L2 perturbation
distance metric.

Both attacks are pure functions of (model, sample, params): given an
immutable model they are safe to run concurrently per sample. The stored
perturbation is the pre-clip signed delta; the perturbed image is always
clip(original + delta, 0, 1) and d_p is the L2 norm of the clipped
difference, i.e. of what the model actually sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .imgfreq import ImageTensor, InvalidInputError

__all__ = [
    "AttackParams",
    "AttackResult",
    "fgsm_attack",
    "cw_attack",
    "perturbation_distance",
]


@dataclass(frozen=True)
class AttackParams:
    kind: str = "fgsm"  # fgsm | cw
    # fgsm
    epsilon: float = 0.1
    step_size: float = 0.01
    max_steps: int = 20
    # cw
    c_tradeoff: float = 1.0
    cw_steps: int = 200
    cw_step_size: float = 0.01
    confidence_margin: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fgsm", "cw"):
            raise InvalidInputError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be >= 0")
        if self.max_steps < 1 or self.cw_steps < 1:
            raise InvalidInputError("step budgets must be >= 1")
        if self.c_tradeoff <= 0:
            raise InvalidInputError("c_tradeoff must be positive")


@dataclass(frozen=True)
class AttackResult:
    sample_id: str
    perturbation: ImageTensor  # pre-clip signed delta
    perturbed: ImageTensor  # clip(original + perturbation, 0, 1)
    success: bool
    d_p: float
    steps_used: int


def perturbation_distance(original: ImageTensor, perturbed: ImageTensor) -> float:
    """Euclidean norm of the pixel difference over all channels."""
    if original.values.shape != perturbed.values.shape:
        raise InvalidInputError(
            f"dimension mismatch: {original.values.shape} vs {perturbed.values.shape}"
        )
    return float(np.sqrt(np.sum((perturbed.values - original.values) ** 2)))


def _predict_one(model: nnet.TrainedModel, pixels: np.ndarray) -> int:
    return int(np.argmax(nnet.forward(model, pixels[np.newaxis])[0]))


def _result(sample_id, original: np.ndarray, delta: np.ndarray, success: bool, steps: int) -> AttackResult:
    perturbed = ImageTensor(np.clip(original + delta, 0.0, 1.0))
    return AttackResult(
        sample_id=sample_id,
        perturbation=ImageTensor(delta),
        perturbed=perturbed,
        success=success,
        d_p=perturbation_distance(ImageTensor(original), perturbed),
        steps_used=steps,
    )


def fgsm_attack(model: nnet.TrainedModel, sample, params: AttackParams) -> AttackResult:
    """Iterative sign-gradient ascent on the true-label cross-entropy.

    Each step adds step_size * sign(input gradient), projects the delta onto
    the L-inf ball of radius epsilon, and evaluates on the [0,1]-clipped
    image. Stops early once the prediction flips.
    """
    original = sample.image.values
    label = int(sample.category)
    delta = np.zeros_like(original)
    if _predict_one(model, original) != label:
        return _result(sample.id, original, delta, success=True, steps=0)
    if params.epsilon == 0.0:
        return _result(sample.id, original, delta, success=False, steps=0)

    labels = np.array([label])

    def ce_dlogits(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[0, label] -= 1.0
        return probs

    for step in range(1, params.max_steps + 1):
        x_adv = np.clip(original + delta, 0.0, 1.0)
        _, _, igrad = nnet.forward_backward(
            model, x_adv[np.newaxis], ce_dlogits, need_param_grads=False
        )
        g = igrad[0]
        if step == 1 and not np.any(g):
            return _result(sample.id, original, delta, success=False, steps=0)
        delta = np.clip(delta + params.step_size * np.sign(g), -params.epsilon, params.epsilon)
        if _predict_one(model, np.clip(original + delta, 0.0, 1.0)) != label:
            return _result(sample.id, original, delta, success=True, steps=step)
    return _result(sample.id, original, delta, success=False, steps=params.max_steps)


def cw_attack(model: nnet.TrainedModel, sample, params: AttackParams) -> AttackResult:
    """L2 attack: minimize ||delta||^2 + c * max(z_true - max_other, -kappa).

    Momentum-free descent with steps normalized to a fixed L2 length, so the
    step magnitude adapts to the gradient scale while the update direction
    (and hence its spectrum) is the exact objective gradient. Runs the full
    step budget and returns the successful delta of minimum norm seen;
    failure returns the final delta.
    """
    original = sample.image.values
    label = int(sample.category)
    if _predict_one(model, original) != label:
        return _result(sample.id, original, np.zeros_like(original), success=True, steps=0)

    kappa = params.confidence_margin
    delta = np.zeros_like(original)
    best_delta = None
    best_norm = np.inf
    state: dict = {}

    def margin_dlogits(logits):
        z = logits[0]
        pred = int(np.argmax(z))
        other = np.delete(z, label)
        j_star = int(np.argmax(other))
        if j_star >= label:
            j_star += 1
        margin = float(z[label] - z[j_star])
        state.update(pred=pred, margin=margin)
        d = np.zeros_like(logits)
        if margin > -kappa:
            d[0, label] = 1.0
            d[0, j_star] = -1.0
        return d

    for step in range(1, params.cw_steps + 1):
        x_adv = np.clip(original + delta, 0.0, 1.0)
        _, _, igrad = nnet.forward_backward(
            model, x_adv[np.newaxis], margin_dlogits, need_param_grads=False
        )
        if state["pred"] != label:
            norm = float(np.sqrt(np.sum(delta**2)))
            if norm < best_norm:
                best_norm = norm
                best_delta = delta.copy()
        # clip passes gradient only where the box is inactive
        inside = (x_adv > 0.0) & (x_adv < 1.0)
        g = 2.0 * delta + params.c_tradeoff * igrad[0] * inside
        g_norm = float(np.sqrt(np.sum(g * g)))
        if g_norm == 0.0:
            break
        delta = delta - params.cw_step_size * g / g_norm

    # final candidate after the last update
    if _predict_one(model, np.clip(original + delta, 0.0, 1.0)) != label:
        norm = float(np.sqrt(np.sum(delta**2)))
        if norm < best_norm:
            best_norm = norm
            best_delta = delta.copy()

    if best_delta is None:
        return _result(sample.id, original, delta, success=False, steps=params.cw_steps)
    return _result(sample.id, original, best_delta, success=True, steps=params.cw_steps)
