"""Line-by-line transcription of the meta-training loop, one scalar at a time.

Written independently of ``rffspoof.metalearn``: only the task sampler and the
loss gradient (the learner's business, not the algorithm's) are borrowed.
The outer "update" line is realised with bias-corrected Adam, and the sum
over tasks adds each coordinate's per-task values in ascending order, the
library's documented order-independent reduction.
"""
import math

import numpy as np

from rffspoof import tensor as T
from rffspoof.metalearn import meta_rngs, sample_episode, resolve_combo


def soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0 * x if x == 0 else 0.0


def grad(learner, theta, support, evaluate):
    return T.value_and_grad(lambda p: learner.loss(p, support, evaluate), theta)


def flat_items(arrays):
    """(name, index) pairs in a fixed order."""
    return [(k, i) for k in sorted(arrays) for i in np.ndindex(np.shape(arrays[k]))]


def run(cfg, registry, combos, learner, epochs=None):
    """Returns the per-step trace: dicts with theta_in, grads, theta_adam, z, u, theta_out, loss."""
    combos = [resolve_combo(c) for c in combos]
    init_rng, ep_rng = meta_rngs(cfg.seed)
    theta = {k: np.array(v, dtype=float) for k, v in learner.init_params(init_rng).items()}
    reg = sorted(theta) if learner.regularized is None else list(learner.regularized)
    # Data: u0 = 0, z0 = theta0
    u = {k: np.zeros_like(theta[k]) for k in reg}
    z = {k: theta[k].copy() for k in reg}
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v2 = {k: np.zeros_like(v) for k, v in theta.items()}
    t = 0
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    task_id = 0
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        for _ in range(cfg.steps_per_epoch):
            # Sample batch of tasks
            tasks = []
            for _ in range(cfg.tasks_per_batch):
                combo = combos[int(ep_rng.integers(len(combos)))] if len(combos) > 1 else combos[0]
                tasks.append(sample_episode(registry, combo, cfg, ep_rng, task_id))
                task_id += 1
            per_task = []
            losses = []
            for task in tasks:
                # Inner loop: theta_i(0) <- theta
                th = {k: v.copy() for k, v in theta.items()}
                for _k in range(cfg.inner_steps):
                    _, g = grad(learner, th, task.support, task.support)
                    for name, idx in flat_items(th):
                        th[name][idx] = th[name][idx] - cfg.inner_lr * g[name][idx]
                # Evaluate on query set
                lq, gq = grad(learner, th, task.support, task.query)
                losses.append(lq)
                per_task.append(gq)
            # Meta-gradient: sum over tasks
            meta_g = {k: np.zeros_like(v) for k, v in theta.items()}
            for name, idx in flat_items(theta):
                acc = 0.0
                for val in sorted(float(g[name][idx]) for g in per_task):
                    acc += val
                meta_g[name][idx] = acc
            theta_in = {k: v.copy() for k, v in theta.items()}
            # Update (Adam, outer_lr)
            t += 1
            for name, idx in flat_items(theta):
                g = meta_g[name][idx]
                m[name][idx] = b1 * m[name][idx] + (1 - b1) * g
                v2[name][idx] = b2 * v2[name][idx] + (1 - b2) * g * g
                mh = m[name][idx] / (1 - b1 ** t)
                vh = v2[name][idx] / (1 - b2 ** t)
                theta[name][idx] = theta[name][idx] - cfg.outer_lr * mh / (math.sqrt(vh) + eps)
            theta_adam = {k: v.copy() for k, v in theta.items()}
            # ADMM regularisation, in the listed order
            for name in reg:
                for idx in np.ndindex(theta[name].shape):
                    z[name][idx] = soft(theta[name][idx] + u[name][idx], cfg.lam / cfg.rho)
                for idx in np.ndindex(theta[name].shape):
                    u[name][idx] = u[name][idx] + (theta[name][idx] - z[name][idx])
                for idx in np.ndindex(theta[name].shape):
                    theta[name][idx] = z[name][idx] - u[name][idx]
            trace.append({"epoch": epoch, "theta_in": theta_in, "grads": meta_g, "theta_adam": theta_adam,
                          "z": {k: v.copy() for k, v in z.items()}, "u": {k: v.copy() for k, v in u.items()},
                          "theta_out": {k: v.copy() for k, v in theta.items()},
                          "loss": float(np.mean(losses)), "episodes": tasks})
    return trace


def admm_literal(theta, z, u, lam, rho):
    """The three ADMM lines applied to plain dicts; returns (theta, z, u) copies."""
    theta = {k: np.array(v, dtype=float) for k, v in theta.items()}
    z = {k: np.array(v, dtype=float) for k, v in z.items()}
    u = {k: np.array(v, dtype=float) for k, v in u.items()}
    for name in sorted(z):
        for idx in np.ndindex(theta[name].shape):
            z[name][idx] = soft(theta[name][idx] + u[name][idx], lam / rho)
            u[name][idx] = u[name][idx] + (theta[name][idx] - z[name][idx])
            theta[name][idx] = z[name][idx] - u[name][idx]
    return theta, z, u
