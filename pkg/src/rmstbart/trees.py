"""Decision trees, the sum-of-trees prior, and the conjugate Gaussian leaf
algebra under the weighted squared-error loss.

Two tree layouts are used:

* :class:`DecisionTree` -- immutable pre-order node arrays, the form used for
  storage, serialization and prediction;
* :class:`SlotForest` -- fixed-capacity mutable slot arrays the compiled MCMC
  kernel updates in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from .errors import ConfigurationError, ParameterDomainError
from .numerics import RngHandle

MOVE_NAMES = ("grow", "prune", "change")


@dataclass
class CutpointGrid:
    """Per-variable increasing candidate split values.

    ``values`` is ``(p, Kmax)`` and NaN padded; ``counts[j]`` is the number of
    valid cutpoints of variable ``j`` (0 means the variable cannot split).
    """

    values: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.values.shape[1] == 0:
            self.values = np.zeros((self.values.shape[0], 1))
        for j, k in enumerate(self.counts):
            g = self.values[j, :k]
            if k > 1 and not np.all(np.diff(g) > 0):
                raise ConfigurationError(f"cutpoints of variable {j} are not strictly increasing")

    @classmethod
    def from_lists(cls, cuts: list) -> "CutpointGrid":
        kmax = max([len(c) for c in cuts] + [1])
        values = np.full((len(cuts), kmax), np.nan)
        for j, c in enumerate(cuts):
            values[j, : len(c)] = c
        return cls(values, np.array([len(c) for c in cuts]))

    @classmethod
    def from_data(cls, X, grid_size: int = 100) -> "CutpointGrid":
        """Quantile cutpoints of each column of ``X``.

        Columns with at most ``grid_size + 1`` distinct values split at the
        midpoints between consecutive values (so a binary column gets its
        single midpoint); others at ``grid_size`` interior quantiles.
        """
        if grid_size < 1:
            raise ConfigurationError("grid_size must be positive")
        X = np.asarray(X, dtype=float)
        cuts = []
        for j in range(X.shape[1]):
            col = X[:, j]
            u = np.unique(col[np.isfinite(col)])
            if u.size <= grid_size + 1:
                c = 0.5 * (u[:-1] + u[1:])
            else:
                q = np.quantile(col, np.arange(1, grid_size + 1) / (grid_size + 1))
                c = np.unique(q)
                c = c[(c >= u[0]) & (c < u[-1])]
            cuts.append(c)
        return cls.from_lists(cuts)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def available(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0).astype(np.int64)

    def value(self, var: int, cut: int) -> float:
        return float(self.values[var, cut])

    def as_lists(self) -> list[list[float]]:
        return [self.values[j, :k].tolist() for j, k in enumerate(self.counts)]


@dataclass(frozen=True)
class TreePriorParams:
    alpha: float = 0.95
    beta: float = 2.0
    p_grow: float = 0.3
    p_prune: float = 0.3
    p_change: float = 0.4
    max_depth: int = 64

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ParameterDomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta < 0:
            raise ParameterDomainError(f"beta must be non-negative, got {self.beta}")
        probs = (self.p_grow, self.p_prune, self.p_change)
        if min(probs) <= 0 or abs(sum(probs) - 1) > 1e-12:
            raise ParameterDomainError(f"move probabilities must be positive and sum to 1, got {probs}")
        if self.max_depth < 0:
            raise ParameterDomainError("max_depth must be non-negative")

    def split_prob(self, depth: int) -> float:
        if depth >= self.max_depth:
            return 0.0
        return self.alpha * (1.0 + depth) ** (-self.beta)


@dataclass(frozen=True)
class LeafPriorParams:
    sigma_mu: float
    mu_mu: float = 0.0

    def __post_init__(self):
        if not self.sigma_mu > 0:
            raise ParameterDomainError(f"sigma_mu must be positive, got {self.sigma_mu}")


@dataclass
class WeightedResiduals:
    """Partial residuals, IPCW weights (zero for non-events) and the loss scale."""

    residuals: np.ndarray
    weights: np.ndarray
    eta: float

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.residuals.shape != self.weights.shape:
            raise ConfigurationError("residuals and weights differ in length")
        if np.any(self.weights < 0):
            raise ParameterDomainError("weights must be non-negative")
        if not self.eta > 0:
            raise ParameterDomainError(f"eta must be positive, got {self.eta}")


@dataclass
class DecisionTree:
    """A binary tree in pre-order with tree-local child indices.

    ``var[k] >= 0`` marks an interior node splitting variable ``var[k]`` at
    grid index ``cut[k]``; ``var[k] == -1`` marks a leaf with value ``mu[k]``.
    """

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.var = np.asarray(self.var, dtype=np.int32)
        self.cut = np.asarray(self.cut, dtype=np.int32)
        self.left = np.asarray(self.left, dtype=np.int32)
        self.right = np.asarray(self.right, dtype=np.int32)
        self.mu = np.asarray(self.mu, dtype=float)

    @classmethod
    def leaf(cls, value: float = 0.0) -> "DecisionTree":
        return cls([K.LEAF], [0], [-1], [-1], [value])

    @classmethod
    def from_dict(cls, node: dict) -> "DecisionTree":
        var, cut, left, right, mu = [], [], [], [], []

        def visit(nd):
            k = len(var)
            if "leaf-value" in nd:
                var.append(K.LEAF); cut.append(0); left.append(-1); right.append(-1)
                mu.append(float(nd["leaf-value"]))
                return k
            var.append(int(nd["var"])); cut.append(int(nd["cut"]))
            left.append(-1); right.append(-1); mu.append(0.0)
            left[k] = visit(nd["left"])
            right[k] = visit(nd["right"])
            return k

        visit(node)
        return cls(var, cut, left, right, mu)

    def to_dict(self, k: int = 0) -> dict:
        if self.var[k] < 0:
            return {"leaf-value": float(self.mu[k])}
        return {
            "var": int(self.var[k]),
            "cut": int(self.cut[k]),
            "left": self.to_dict(int(self.left[k])),
            "right": self.to_dict(int(self.right[k])),
        }

    @property
    def n_nodes(self) -> int:
        return self.var.shape[0]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.var < 0)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.var < 0))

    def depths(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int32)
        for k in range(self.n_nodes):  # pre-order: parents precede children
            if self.var[k] >= 0:
                d[self.left[k]] = d[k] + 1
                d[self.right[k]] = d[k] + 1
        return d

    def signature(self, k: int = 0):
        """Hashable description of topology and split rules (leaf values ignored)."""
        if self.var[k] < 0:
            return ()
        return (int(self.var[k]), int(self.cut[k]),
                self.signature(int(self.left[k])), self.signature(int(self.right[k])))

    def to_slots(self, capacity: int):
        """Slot arrays ``(var, cut, left, right, depth, mu)`` of the given capacity."""
        n = self.n_nodes
        if n > capacity:
            raise ConfigurationError(f"tree has {n} nodes, capacity is {capacity}")
        var = np.full(capacity, K.UNUSED, dtype=np.int32)
        cut = np.zeros(capacity, dtype=np.int32)
        left = np.full(capacity, -1, dtype=np.int32)
        right = np.full(capacity, -1, dtype=np.int32)
        depth = np.zeros(capacity, dtype=np.int32)
        mu = np.zeros(capacity)
        var[:n], cut[:n], left[:n], right[:n], mu[:n] = self.var, self.cut, self.left, self.right, self.mu
        depth[:n] = self.depths()
        return var, cut, left, right, depth, mu

    @classmethod
    def from_slots(cls, var, cut, left, right, mu) -> "DecisionTree":
        pv, pc, pl, pr, pm, _ = K.compact_forest(
            var[None, :], cut[None, :], left[None, :], right[None, :], mu[None, :]
        )
        return cls(pv, pc, pl, pr, pm)


@dataclass
class Forest:
    trees: list[DecisionTree] = field(default_factory=list)

    @property
    def H(self) -> int:
        return len(self.trees)

    @classmethod
    def constant(cls, H: int, value: float = 0.0) -> "Forest":
        return cls([DecisionTree.leaf(value) for _ in range(H)])


def assign_leaf(tree: DecisionTree, x, grid: CutpointGrid) -> int:
    """Index of the leaf reached by covariate row ``x``."""
    x = np.asarray(x, dtype=float)
    return int(K.route(tree.var, tree.cut, tree.left, tree.right, grid.values, x))


def predict_forest(forest: Forest, X, grid: CutpointGrid) -> np.ndarray:
    """Sum over trees of the leaf value each row reaches (centered scale)."""
    return ForestDraws.from_forests([forest], grid.p).predict(X, grid)[0]


def log_tree_prior(tree: DecisionTree, prior: TreePriorParams, grid: CutpointGrid) -> float:
    """Log prior probability of a tree's structure and split rules.

    Nodes split with probability ``alpha (1 + d)^-beta`` at depth ``d`` (zero
    at ``prior.max_depth``); split variables are uniform over variables with
    at least one cutpoint and cutpoints uniform over that variable's grid.
    """
    n_avail = int(np.sum(grid.counts > 0))
    depths = tree.depths()
    out = 0.0
    for k in range(tree.n_nodes):
        ps = prior.split_prob(int(depths[k]))
        if tree.var[k] >= 0:
            out += math.log(ps) - math.log(n_avail) - math.log(grid.counts[tree.var[k]])
        elif ps > 0:
            out += math.log1p(-ps)
    return out


def leaf_sufficient_stats(tree: DecisionTree, wr: WeightedResiduals, X, grid: CutpointGrid):
    """Per-leaf ``(s_j, t_j)``: weight sums and weighted residual sums.

    Returned as two arrays ordered like ``tree.leaves``.
    """
    X = np.asarray(X, dtype=float)
    leaf_of = np.empty(X.shape[0], dtype=np.int64)
    K.route_all(tree.var, tree.cut, tree.left, tree.right, grid.values, X, leaf_of)
    _, s, t = K.leaf_stats(leaf_of, wr.weights, wr.residuals, tree.n_nodes)
    leaves = tree.leaves
    return s[leaves], t[leaves]


def integrated_log_likelihood(stats, eta: float, leaf_prior: LeafPriorParams) -> float:
    """Log of the leaf-marginalized loss term, up to a tree-independent constant.

    Per leaf, with ``a = 2 eta s + sigma_mu^-2``, the contribution is
    ``0.5 log(sigma_mu^-2 / a) + (2 eta t)^2 / (2a)`` (plus prior-mean terms
    when ``mu_mu != 0``).
    """
    s, t = (np.atleast_1d(np.asarray(v, dtype=float)) for v in stats)
    if not eta > 0:
        raise ParameterDomainError("eta must be positive")
    return float(sum(K.leaf_loglik(si, ti, eta, leaf_prior.sigma_mu, leaf_prior.mu_mu) for si, ti in zip(s, t)))


def leaf_posterior(stats, eta: float, leaf_prior: LeafPriorParams):
    """Conditional mean and variance of each leaf value."""
    s, t = (np.atleast_1d(np.asarray(v, dtype=float)) for v in stats)
    prec0 = leaf_prior.sigma_mu ** -2
    a = 2.0 * eta * s + prec0
    return (2.0 * eta * t + leaf_prior.mu_mu * prec0) / a, 1.0 / a


def sample_leaf_params(stats, eta: float, leaf_prior: LeafPriorParams, rng: RngHandle) -> np.ndarray:
    if not eta > 0:
        raise ParameterDomainError("eta must be positive")
    mean, var = leaf_posterior(stats, eta, leaf_prior)
    return mean + np.sqrt(var) * rng.generator.standard_normal(mean.shape)


@dataclass
class Proposal:
    tree: DecisionTree
    move: str | None
    node: int
    log_q_ratio: float
    log_prior_ratio: float


def propose_move(tree: DecisionTree, prior: TreePriorParams, grid: CutpointGrid, rng: RngHandle,
                 capacity: int = 255) -> Proposal:
    """Draw a grow, prune or change proposal.

    Infeasible moves are dropped and the remaining move probabilities
    renormalized. ``log_q_ratio`` is ``log q(T'->T) - log q(T->T')``;
    ``log_prior_ratio`` is ``log pi(T') - log pi(T)``. ``node`` indexes the
    changed node in the *input* tree's slot layout.
    """
    var, cut, left, right, depth, mu = tree.to_slots(max(capacity, tree.n_nodes + 2))
    move, node, log_q, log_pr = K.propose(
        var, cut, left, right, depth, mu, grid.available, grid.counts,
        prior.alpha, prior.beta, prior.p_grow, prior.p_prune, prior.p_change,
        prior.max_depth, rng.generator,
    )
    name = None if move == K.NOMOVE else MOVE_NAMES[move]
    return Proposal(DecisionTree.from_slots(var, cut, left, right, mu), name, int(node), log_q, log_pr)


class SlotForest:
    """Mutable forest state for the sampler: ``(H, capacity)`` slot arrays plus
    the leaf each training row currently reaches in every tree."""

    def __init__(self, H: int, n: int, capacity: int = 255, init_value: float = 0.0):
        if H < 1:
            raise ConfigurationError("H must be positive")
        self.var = np.full((H, capacity), K.UNUSED, dtype=np.int32)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((H, capacity), dtype=np.int32)
        self.left = np.full((H, capacity), -1, dtype=np.int32)
        self.right = np.full((H, capacity), -1, dtype=np.int32)
        self.depth = np.zeros((H, capacity), dtype=np.int32)
        self.mu = np.zeros((H, capacity))
        self.mu[:, 0] = init_value
        self.leaf_of = np.zeros((H, n), dtype=np.int64)
        self.fit = np.full(n, H * init_value)
        self.move_stats = np.zeros((4, 2), dtype=np.int64)

    @property
    def H(self) -> int:
        return self.var.shape[0]

    def sweep(self, Y, w, X, grid: CutpointGrid, eta, leaf_prior: LeafPriorParams,
              prior: TreePriorParams, rng: RngHandle):
        K.backfit_sweep(
            self.var, self.cut, self.left, self.right, self.depth, self.mu, self.leaf_of,
            self.fit, np.ascontiguousarray(Y, dtype=float), np.ascontiguousarray(w, dtype=float),
            X, grid.values, grid.counts, grid.available, float(eta), leaf_prior.sigma_mu,
            leaf_prior.mu_mu, prior.alpha, prior.beta, prior.p_grow, prior.p_prune,
            prior.p_change, prior.max_depth, rng.generator, self.move_stats,
        )

    def mh_step(self, h: int, wr: WeightedResiduals, X, grid: CutpointGrid,
                leaf_prior: LeafPriorParams, prior: TreePriorParams, rng: RngHandle):
        """Structure-only MH update of tree ``h`` (leaf values left untouched)."""
        move, acc, _, _ = K.mh_tree_step(
            self.var[h], self.cut[h], self.left[h], self.right[h], self.depth[h], self.mu[h],
            self.leaf_of[h], X, grid.values, grid.counts, grid.available,
            wr.residuals, wr.weights, wr.eta, leaf_prior.sigma_mu, leaf_prior.mu_mu,
            prior.alpha, prior.beta, prior.p_grow, prior.p_prune, prior.p_change,
            prior.max_depth, rng.generator,
        )
        return (None if move == K.NOMOVE else MOVE_NAMES[move]), bool(acc)

    def tree(self, h: int) -> DecisionTree:
        return DecisionTree.from_slots(self.var[h], self.cut[h], self.left[h], self.right[h], self.mu[h])

    def pack(self):
        return K.compact_forest(self.var, self.cut, self.left, self.right, self.mu)

    def acceptance_rates(self) -> dict:
        out = {}
        for m, name in enumerate(MOVE_NAMES):
            tried, acc = self.move_stats[m]
            out[name] = {"proposed": int(tried), "accepted": int(acc),
                         "rate": float(acc / tried) if tried else float("nan")}
        return out


class ForestDraws:
    """A sequence of forests packed into flat arrays.

    ``tree_start`` indexes node ranges per tree and ``draw_start`` tree
    ranges per draw.
    """

    def __init__(self, var, cut, left, right, mu, tree_start, draw_start, n_vars: int):
        self.var = np.asarray(var, dtype=np.int32)
        self.cut = np.asarray(cut, dtype=np.int32)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.mu = np.asarray(mu, dtype=float)
        self.tree_start = np.asarray(tree_start, dtype=np.int64)
        self.draw_start = np.asarray(draw_start, dtype=np.int64)
        self.n_vars = int(n_vars)

    @classmethod
    def empty(cls, n_vars: int) -> "ForestDraws":
        z = np.zeros(0)
        return cls(z, z, z, z, z, [0], [0], n_vars)

    @classmethod
    def concat(cls, packs: list, n_vars: int) -> "ForestDraws":
        """Join the outputs of :meth:`SlotForest.pack`."""
        if not packs:
            return cls.empty(n_vars)
        node_off = 0
        tree_off = 0
        tree_starts, draw_start = [], [0]
        for p in packs:
            ts = p[5]
            tree_starts.append(ts[:-1] + node_off)
            node_off += int(ts[-1])
            tree_off += ts.shape[0] - 1
            draw_start.append(tree_off)
        tree_starts.append(np.array([node_off]))
        return cls(
            *(np.concatenate([p[i] for p in packs]) for i in range(5)),
            np.concatenate(tree_starts), np.array(draw_start), n_vars,
        )

    @classmethod
    def from_forests(cls, forests: list[Forest], n_vars: int) -> "ForestDraws":
        packs = []
        for f in forests:
            sizes = [t.n_nodes for t in f.trees]
            ts = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
            cat = lambda name, dt: (np.concatenate([getattr(t, name) for t in f.trees]).astype(dt)
                                    if f.trees else np.zeros(0, dt))
            packs.append((cat("var", np.int32), cat("cut", np.int32), cat("left", np.int32),
                          cat("right", np.int32), cat("mu", float), ts))
        return cls.concat(packs, n_vars)

    def __len__(self) -> int:
        return self.draw_start.shape[0] - 1

    def forest(self, d: int) -> Forest:
        trees = []
        for tr in range(self.draw_start[d], self.draw_start[d + 1]):
            a, b = self.tree_start[tr], self.tree_start[tr + 1]
            trees.append(DecisionTree(self.var[a:b], self.cut[a:b], self.left[a:b], self.right[a:b], self.mu[a:b]))
        return Forest(trees)

    def __iter__(self):
        return (self.forest(d) for d in range(len(self)))

    def predict(self, X, grid: CutpointGrid) -> np.ndarray:
        """Centered sum-of-trees values, shape ``(n_draws, n_rows)``."""
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_vars:
            raise ConfigurationError(f"expected {self.n_vars} covariate columns, got {X.shape}")
        return K.predict_packed(self.var, self.cut, self.left, self.right, self.mu,
                                self.tree_start, self.draw_start, grid.values, X)

    def split_counts(self) -> np.ndarray:
        """``(n_draws, n_vars)`` counts of interior nodes splitting on each variable."""
        D = len(self)
        out = np.zeros((D, self.n_vars))
        if D == 0 or self.var.size == 0:
            return out
        n_trees_per_draw = np.diff(self.draw_start)
        tree_draw = np.repeat(np.arange(D), n_trees_per_draw)
        node_tree = np.repeat(np.arange(self.tree_start.shape[0] - 1), np.diff(self.tree_start))
        node_draw = tree_draw[node_tree]
        interior = self.var >= 0
        np.add.at(out, (node_draw[interior], self.var[interior]), 1.0)
        return out


def variable_importance(draws) -> np.ndarray:
    """Posterior mean number of splits on each variable across all trees.

    ``draws`` is a :class:`ForestDraws` or a sequence of :class:`Forest`
    (in which case the number of variables is inferred from the splits).
    """
    if not isinstance(draws, ForestDraws):
        draws = list(draws)
        if not draws:
            raise ConfigurationError("need at least one draw")
        p = 1 + max([int(t.var.max()) for f in draws for t in f.trees] + [-1])
        draws = ForestDraws.from_forests(draws, p)
    if len(draws) == 0:
        raise ConfigurationError("need at least one draw")
    return draws.split_counts().mean(axis=0)
