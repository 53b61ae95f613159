"""Compiled inner loops for tree MCMC.

Trees live in fixed-capacity slot arrays (``var, cut, left, right, depth,
mu``). ``var[k] >= 0`` marks an interior node splitting on that variable,
``LEAF`` a leaf and ``UNUSED`` a free slot. The root is slot 0. A row goes
left at node ``k`` iff ``X[i, var[k]] <= grid[var[k], cut[k]]``.

Random numbers come from a numpy ``Generator`` passed in by the caller, so
every chain owns its stream.
"""

import math

import numpy as np
from numba import njit

LEAF = -1
UNUSED = -2

GROW, PRUNE, CHANGE, NOMOVE = 0, 1, 2, 3


@njit(cache=True)
def route(var, cut, left, right, grid, x):
    k = 0
    while var[k] >= 0:
        if x[var[k]] <= grid[var[k], cut[k]]:
            k = left[k]
        else:
            k = right[k]
    return k


@njit(cache=True)
def route_all(var, cut, left, right, grid, X, out):
    for i in range(X.shape[0]):
        out[i] = route(var, cut, left, right, grid, X[i])


@njit(cache=True)
def split_prob(alpha, beta, d, max_depth):
    if d >= max_depth:
        return 0.0
    return alpha * (1.0 + d) ** (-beta)


@njit(cache=True)
def census(var, left, right, depth, max_depth):
    """Return (n_growable, n_nog, n_internal, n_free)."""
    n_grow = 0
    n_nog = 0
    n_int = 0
    n_free = 0
    for k in range(var.shape[0]):
        v = var[k]
        if v == UNUSED:
            n_free += 1
        elif v == LEAF:
            if depth[k] < max_depth:
                n_grow += 1
        else:
            n_int += 1
            if var[left[k]] == LEAF and var[right[k]] == LEAF:
                n_nog += 1
    return n_grow, n_nog, n_int, n_free


@njit(cache=True)
def move_probs(var, left, right, depth, max_depth, n_avail, pg, pp, pc):
    """Move probabilities renormalized over the moves feasible for this tree."""
    n_grow, n_nog, n_int, n_free = census(var, left, right, depth, max_depth)
    g = pg if (n_grow > 0 and n_free >= 2 and n_avail > 0) else 0.0
    p = pp if n_nog > 0 else 0.0
    c = pc if (n_int > 0 and n_avail > 0) else 0.0
    tot = g + p + c
    if tot <= 0.0:
        return 0.0, 0.0, 0.0, n_grow, n_nog, n_int
    return g / tot, p / tot, c / tot, n_grow, n_nog, n_int


@njit(cache=True)
def _pick(rng, m):
    j = int(rng.random() * m)
    return m - 1 if j >= m else j


@njit(cache=True)
def _nth_growable(var, depth, max_depth, j):
    for k in range(var.shape[0]):
        if var[k] == LEAF and depth[k] < max_depth:
            if j == 0:
                return k
            j -= 1
    return -1


@njit(cache=True)
def _nth_nog(var, left, right, j):
    for k in range(var.shape[0]):
        if var[k] >= 0 and var[left[k]] == LEAF and var[right[k]] == LEAF:
            if j == 0:
                return k
            j -= 1
    return -1


@njit(cache=True)
def _nth_internal(var, j):
    for k in range(var.shape[0]):
        if var[k] >= 0:
            if j == 0:
                return k
            j -= 1
    return -1


@njit(cache=True)
def _free_slot(var, start):
    for k in range(start, var.shape[0]):
        if var[k] == UNUSED:
            return k
    return -1


@njit(cache=True)
def _grow_log_prior_ratio(alpha, beta, d, max_depth, n_avail, k_v):
    """log pi(T') - log pi(T) when a leaf at depth d gains two children."""
    ps = split_prob(alpha, beta, d, max_depth)
    pc = split_prob(alpha, beta, d + 1, max_depth)
    return (
        math.log(ps)
        - math.log1p(-ps)
        + 2.0 * math.log1p(-pc)
        - math.log(n_avail)
        - math.log(k_v)
    )


@njit(cache=True)
def propose(var, cut, left, right, depth, mu, avail_vars, ncut, alpha, beta,
            pg, pp, pc, max_depth, rng):
    """Apply a random grow/prune/change move to the arrays in place.

    Returns ``(move, node, log_q_ratio, log_prior_ratio)`` where
    ``log_q_ratio = log q(T'->T) - log q(T->T')``.
    """
    n_avail = avail_vars.shape[0]
    g, p, c, n_grow, n_nog, n_int = move_probs(var, left, right, depth, max_depth, n_avail, pg, pp, pc)
    if g + p + c <= 0.0:
        return NOMOVE, -1, 0.0, 0.0
    u = rng.random()
    if u < g:
        k = _nth_growable(var, depth, max_depth, _pick(rng, n_grow))
        v = avail_vars[_pick(rng, n_avail)]
        kv = ncut[v]
        cval = _pick(rng, kv)
        a = _free_slot(var, 1)
        b = _free_slot(var, a + 1)
        var[k] = v
        cut[k] = cval
        left[k] = a
        right[k] = b
        for s in (a, b):
            var[s] = LEAF
            cut[s] = 0
            left[s] = -1
            right[s] = -1
            depth[s] = depth[k] + 1
            mu[s] = 0.0
        g2, p2, c2, ng2, nn2, ni2 = move_probs(var, left, right, depth, max_depth, n_avail, pg, pp, pc)
        log_q = (math.log(p2) - math.log(nn2)) - (
            math.log(g) - math.log(n_grow) - math.log(n_avail) - math.log(kv)
        )
        log_pr = _grow_log_prior_ratio(alpha, beta, depth[k], max_depth, n_avail, kv)
        return GROW, k, log_q, log_pr
    elif u < g + p:
        k = _nth_nog(var, left, right, _pick(rng, n_nog))
        kv = ncut[var[k]]
        for s in (left[k], right[k]):
            var[s] = UNUSED
            left[s] = -1
            right[s] = -1
        var[k] = LEAF
        cut[k] = 0
        left[k] = -1
        right[k] = -1
        mu[k] = 0.0
        g2, p2, c2, ng2, nn2, ni2 = move_probs(var, left, right, depth, max_depth, n_avail, pg, pp, pc)
        log_q = (math.log(g2) - math.log(ng2) - math.log(n_avail) - math.log(kv)) - (
            math.log(p) - math.log(n_nog)
        )
        log_pr = -_grow_log_prior_ratio(alpha, beta, depth[k], max_depth, n_avail, kv)
        return PRUNE, k, log_q, log_pr
    else:
        k = _nth_internal(var, _pick(rng, n_int))
        kv_old = ncut[var[k]]
        v = avail_vars[_pick(rng, n_avail)]
        kv_new = ncut[v]
        var[k] = v
        cut[k] = _pick(rng, kv_new)
        log_q = math.log(kv_new) - math.log(kv_old)
        return CHANGE, k, log_q, -log_q


@njit(cache=True)
def leaf_stats(leaf_of, w, R, n_slots):
    """Per-slot (count, sum of weights, weighted residual sum)."""
    cnt = np.zeros(n_slots, dtype=np.int64)
    s = np.zeros(n_slots)
    t = np.zeros(n_slots)
    for i in range(leaf_of.shape[0]):
        k = leaf_of[i]
        cnt[k] += 1
        s[k] += w[i]
        t[k] += w[i] * R[i]
    return cnt, s, t


@njit(cache=True)
def leaf_loglik(s, t, eta, sigma_mu, mu_mean):
    prec0 = 1.0 / (sigma_mu * sigma_mu)
    a = 2.0 * eta * s + prec0
    b = 2.0 * eta * t + mu_mean * prec0
    return 0.5 * math.log(prec0 / a) + b * b / (2.0 * a) - 0.5 * mu_mean * mu_mean * prec0


@njit(cache=True)
def tree_loglik(var, s, t, eta, sigma_mu, mu_mean):
    out = 0.0
    for k in range(var.shape[0]):
        if var[k] == LEAF:
            out += leaf_loglik(s[k], t[k], eta, sigma_mu, mu_mean)
    return out


@njit(cache=True)
def draw_leaves(var, mu, s, t, eta, sigma_mu, mu_mean, rng):
    prec0 = 1.0 / (sigma_mu * sigma_mu)
    for k in range(var.shape[0]):
        if var[k] == LEAF:
            a = 2.0 * eta * s[k] + prec0
            m = (2.0 * eta * t[k] + mu_mean * prec0) / a
            mu[k] = m + rng.standard_normal() / math.sqrt(a)


@njit(cache=True)
def mh_tree_step(var, cut, left, right, depth, mu, leaf_of, X, grid, ncut, avail_vars,
                 R, w, eta, sigma_mu, mu_mean, alpha, beta, pg, pp, pc, max_depth, rng):
    """One Metropolis-Hastings update of a tree structure given residuals.

    Leaf values are integrated out. ``leaf_of`` is updated on acceptance.
    Returns ``(move, accepted, s, t)`` with the leaf statistics of the
    resulting tree, ready for :func:`draw_leaves`.
    """
    M = var.shape[0]
    cnt, s, t = leaf_stats(leaf_of, w, R, M)
    nv = var.copy()
    nc = cut.copy()
    nl = left.copy()
    nr = right.copy()
    nd = depth.copy()
    nm = mu.copy()
    move, node, log_q, log_pr = propose(nv, nc, nl, nr, nd, nm, avail_vars, ncut,
                                        alpha, beta, pg, pp, pc, max_depth, rng)
    if move == NOMOVE:
        return move, False, s, t
    new_leaf_of = np.empty_like(leaf_of)
    route_all(nv, nc, nl, nr, grid, X, new_leaf_of)
    cnt2, s2, t2 = leaf_stats(new_leaf_of, w, R, M)
    for k in range(M):
        if nv[k] == LEAF and cnt2[k] == 0:
            # empty leaves are rejected outright; still consume the uniform
            rng.random()
            return move, False, s, t
    log_ratio = (
        tree_loglik(nv, s2, t2, eta, sigma_mu, mu_mean)
        - tree_loglik(var, s, t, eta, sigma_mu, mu_mean)
        + log_pr
        + log_q
    )
    if math.log(rng.random()) < log_ratio:
        var[:] = nv
        cut[:] = nc
        left[:] = nl
        right[:] = nr
        depth[:] = nd
        leaf_of[:] = new_leaf_of
        return move, True, s2, t2
    return move, False, s, t


@njit(cache=True)
def backfit_sweep(VAR, CUT, LEFT, RIGHT, DEPTH, MU, LEAF_OF, fit, Y, w, X, grid, ncut,
                  avail_vars, eta, sigma_mu, mu_mean, alpha, beta, pg, pp, pc, max_depth,
                  rng, move_stats):
    """Update every tree in turn against partial residuals (one MCMC sweep).

    ``fit`` is overwritten with the total forest fit at exit.
    ``move_stats[move, 0]`` counts proposals and ``[move, 1]`` acceptances.
    """
    n = Y.shape[0]
    H = VAR.shape[0]
    for i in range(n):
        fit[i] = 0.0
    for h in range(H):
        for i in range(n):
            fit[i] += MU[h, LEAF_OF[h, i]]
    R = np.empty(n)
    for h in range(H):
        for i in range(n):
            R[i] = Y[i] - fit[i] + MU[h, LEAF_OF[h, i]]
        move, acc, s, t = mh_tree_step(
            VAR[h], CUT[h], LEFT[h], RIGHT[h], DEPTH[h], MU[h], LEAF_OF[h], X, grid, ncut,
            avail_vars, R, w, eta, sigma_mu, mu_mean, alpha, beta, pg, pp, pc, max_depth, rng,
        )
        move_stats[move, 0] += 1
        if acc:
            move_stats[move, 1] += 1
        draw_leaves(VAR[h], MU[h], s, t, eta, sigma_mu, mu_mean, rng)
        for i in range(n):
            fit[i] = Y[i] - R[i] + MU[h, LEAF_OF[h, i]]


@njit(cache=True)
def compact_forest(VAR, CUT, LEFT, RIGHT, MU):
    """Pack slot arrays into pre-order node lists with tree-local child indices."""
    H, M = VAR.shape
    total = 0
    for h in range(H):
        for k in range(M):
            if VAR[h, k] != UNUSED:
                total += 1
    var = np.empty(total, dtype=np.int32)
    cut = np.empty(total, dtype=np.int32)
    left = np.empty(total, dtype=np.int32)
    right = np.empty(total, dtype=np.int32)
    mu = np.empty(total)
    tree_start = np.empty(H + 1, dtype=np.int64)
    newidx = np.empty(M, dtype=np.int32)
    stack = np.empty(M, dtype=np.int32)
    pos = 0
    for h in range(H):
        tree_start[h] = pos
        # first pass: pre-order numbering
        top = 0
        stack[0] = 0
        nxt = 0
        while top >= 0:
            k = stack[top]
            top -= 1
            newidx[k] = nxt
            nxt += 1
            if VAR[h, k] >= 0:
                top += 1
                stack[top] = RIGHT[h, k]
                top += 1
                stack[top] = LEFT[h, k]
        top = 0
        stack[0] = 0
        while top >= 0:
            k = stack[top]
            top -= 1
            j = pos + newidx[k]
            var[j] = VAR[h, k]
            cut[j] = CUT[h, k] if VAR[h, k] >= 0 else 0
            mu[j] = MU[h, k] if VAR[h, k] < 0 else 0.0
            if VAR[h, k] >= 0:
                left[j] = newidx[LEFT[h, k]]
                right[j] = newidx[RIGHT[h, k]]
                top += 1
                stack[top] = RIGHT[h, k]
                top += 1
                stack[top] = LEFT[h, k]
            else:
                left[j] = -1
                right[j] = -1
        pos += nxt
    tree_start[H] = pos
    return var, cut, left, right, mu, tree_start


@njit(cache=True)
def predict_packed(var, cut, left, right, mu, tree_start, draw_start, grid, X):
    """Sum-of-trees predictions, shape ``(n_draws, n_rows)``."""
    D = draw_start.shape[0] - 1
    n = X.shape[0]
    out = np.empty((D, n))
    for d in range(D):
        for i in range(n):
            acc = 0.0
            for tr in range(draw_start[d], draw_start[d + 1]):
                base = tree_start[tr]
                k = 0
                while var[base + k] >= 0:
                    v = var[base + k]
                    if X[i, v] <= grid[v, cut[base + k]]:
                        k = left[base + k]
                    else:
                        k = right[base + k]
                acc += mu[base + k]
            out[d, i] = acc
    return out
