"""Shared oracles for the test suite: central finite differences and micro models."""

import numpy as np

from fusion_transformer import tensor as T
from fusion_transformer.models import IMAGE, WINDOW, Hyperparameters, build, spec_from_hyperparameters
from fusion_transformer.nn import assign


def numeric_grad(loss_fn, p, eps=1e-6):
    """Central differences of the scalar ``loss_fn()`` with respect to tensor ``p``."""
    base = p.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            bumped = base.copy().reshape(-1)
            bumped[i] += sign * eps
            assign(p, bumped.reshape(base.shape))
            flat[i] += sign * float(loss_fn().data)
        flat[i] /= 2 * eps
    assign(p, base)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def tape_grads(loss_fn, params):
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def check_grads(loss_fn, named_params, eps=1e-6, floor=1e-6):
    """Worst relative error between tape and finite-difference gradients, with its name."""
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    analytic = tape_grads(loss_fn, params)
    worst = (0.0, None)
    for name, p, g in zip(names, params, analytic):
        err = rel_err(g, numeric_grad(loss_fn, p, eps), floor)
        if err > worst[0]:
            worst = (err, name)
    return worst


MICRO = dict(p_drop=0.0, k=3, d_e=8, d_ff=8, E=2, h=2, patch=(3, 3), d_fusion=4, hidden_dims=(8,),
             s_in=6, f_in=2, f_out=2, n_classes=3, image_shape=(6, 6, 3))


def micro_hp(inputs, tasks, **overrides):
    return Hyperparameters(model_id="micro", inputs=tuple(inputs), tasks=tuple(tasks), **{**MICRO, **overrides})


def micro_model(inputs, tasks, seed=0, **overrides):
    return build(spec_from_hyperparameters(micro_hp(inputs, tasks, **overrides)), seed)


def micro_batch(model, batch=2, seed=1):
    rng = np.random.default_rng(seed)
    inputs, targets = {}, {}
    hp = MICRO
    if WINDOW in model.input_names:
        inputs[WINDOW] = rng.normal(size=(batch, hp["s_in"], hp["f_in"]))
    if IMAGE in model.input_names:
        inputs[IMAGE] = rng.uniform(size=(batch,) + hp["image_shape"])
    for t in model.spec.task_heads:
        if "regression" in t.spec.kind:
            targets[t.name] = rng.normal(size=(batch, hp["f_out"]))
        else:
            targets[t.name] = rng.integers(0, t.spec.n_classes, size=batch)
    return inputs, targets


# one "PASS/FAIL <criterion>: detail" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []
