"""Slow, loop-based reference implementations shared by the test modules."""

import math

import numpy as np

from persalign.data import PreferenceLog
from persalign.scores import mnl_loss

from conftest import make_instance


def brute_objective(model, log, inst, ridge):
    total = 0.0
    for rec in log.records():
        m = model.user_matrices()[rec.user]
        x = inst.contexts[rec.user, rec.context]
        v = np.array([x @ m @ inst.actions[rec.user, a] for a in rec.slate])
        total += float(mnl_loss(v, rec.chosen))
    pen = 0.5 * ridge * (np.sum(model.w_hat**2) + np.sum(model.heads_hat**2))
    return total / len(log) + pen


def random_log(inst, t, k, rng):
    log = PreferenceLog(k)
    log.extend(rng.integers(inst.num_users, size=t), rng.integers(inst.n_ctx, size=t),
               rng.integers(inst.n_act, size=(t, k)), rng.integers(k, size=t))
    return log


def one_d_problem(gap, t, seed):
    inst = make_instance([[[1.0]]], [[gap]], [[[1.0]]], [[[1.0], [0.0]]])
    rng = np.random.default_rng(seed)
    p0 = 1 / (1 + math.exp(-gap))
    chosen = (rng.random(t) >= p0).astype(int)
    log = PreferenceLog(2)
    log.extend(np.zeros(t, int), np.zeros(t, int), np.tile([0, 1], (t, 1)), chosen)
    return inst, log, int((chosen == 0).sum())


def grid_oracle(n0, t, ridge):
    """min over theta of mean softplus loss + ridge |theta| (the balanced penalty)."""
    def f(theta):
        return (n0 * np.logaddexp(0, -theta) + (t - n0) * np.logaddexp(0, theta)) / t + ridge * np.abs(theta)

    grid = np.arange(-10, 10, 1e-3)
    best = grid[np.argmin(f(grid))]
    fine = np.arange(best - 1e-3, best + 1e-3, 1e-6)
    k = np.argmin(f(fine))
    return fine[k], f(fine[k])


def enumerate_regret(inst, model, weighting="rho"):
    """Loop over every (user, context); first maximal index wins ties."""
    rho = inst.user_dist if weighting == "rho" else np.full(inst.num_users, 1 / inst.num_users)
    reg = mass = 0.0
    for i in range(inst.num_users):
        mt = np.einsum("j,jkl->kl", inst.heads_true[:, i], inst.w_true)
        mc = np.einsum("j,jkl->kl", model.heads_hat[:, i], model.w_hat)
        for c in range(inst.n_ctx):
            x = inst.contexts[i, c]
            truth = [x @ mt @ a for a in inst.actions[i]]
            cand = [x @ mc @ a for a in inst.actions[i]]
            best_t = max(range(len(truth)), key=lambda k: (truth[k], -k))
            best_c = max(range(len(cand)), key=lambda k: (cand[k], -k))
            w = rho[i] / inst.n_ctx
            reg += w * (truth[best_t] - truth[best_c])
            mass += w * (best_t != best_c)
    return reg, mass
