"""Decision trees, ensembles, the branching-process tree prior and topology moves.

Trees are stored as flat node arrays (Python lists, since trees stay small).
A node is internal when ``var[i] >= 0``; it sends ``x`` left iff
``x[var] <= cut``.  Leaves carry a ``K``-vector of leaf values.  Pruned
node ids are recycled through a free list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .family import leaf_prior_from_sigma

LEAF = -1
DEAD = -2

GROW, PRUNE, CHANGE = "grow", "prune", "change"
MOVE_PROBS = {GROW: 0.3, PRUNE: 0.3, CHANGE: 0.4}


@dataclass(frozen=True)
class TreePrior:
    """Branching-process prior: a node at depth d splits w.p. ``gamma (1 + d)^-beta``.

    ``max_depth`` (optional) forbids splits at that depth and below, which makes
    the tree space finite for enumeration checks.
    """

    gamma_base: float = 0.95
    beta_depth: float = 2.0
    max_depth: int | None = None

    def p_split(self, depth: int) -> float:
        if self.max_depth is not None and depth >= self.max_depth:
            return 0.0
        return self.gamma_base * (1.0 + depth) ** (-self.beta_depth)


class Cutpoints:
    """Per-feature grids of candidate split values."""

    def __init__(self, grids):
        self.grids = [np.asarray(g, dtype=float) for g in grids]
        for j, g in enumerate(self.grids):
            if g.size == 0:
                raise ValueError(f"feature {j} has no candidate cutpoints")
        self.sizes = np.array([g.size for g in self.grids])

    @classmethod
    def from_data(cls, x: np.ndarray, max_cuts: int = 100) -> "Cutpoints":
        grids = []
        for j in range(x.shape[1]):
            u = np.unique(x[:, j])
            if u.size <= 1:
                grids.append(u if u.size else np.zeros(1))
            elif u.size <= max_cuts + 1:
                grids.append(0.5 * (u[:-1] + u[1:]))
            else:
                probs = np.arange(1, max_cuts + 1) / (max_cuts + 1)
                grids.append(np.unique(np.quantile(x[:, j], probs)))
        return cls(grids)

    @property
    def P(self) -> int:
        return len(self.grids)


class DecisionTree:
    """A binary decision tree with ``K``-dimensional leaf values."""

    __slots__ = ("var", "cut", "left", "right", "parent", "depth", "value", "K", "free")

    def __init__(self, K: int = 1, value=None):
        self.K = K
        self.var = [LEAF]
        self.cut = [0.0]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]
        self.depth = [0]
        v = np.zeros(K) if value is None else np.asarray(value, dtype=float).reshape(K)
        self.value = [v]
        self.free = []

    def copy(self) -> "DecisionTree":
        t = DecisionTree.__new__(DecisionTree)
        t.K = self.K
        t.var = self.var.copy()
        t.cut = self.cut.copy()
        t.left = self.left.copy()
        t.right = self.right.copy()
        t.parent = self.parent.copy()
        t.depth = self.depth.copy()
        t.value = [v.copy() for v in self.value]
        t.free = self.free.copy()
        return t

    @property
    def n_slots(self) -> int:
        return len(self.var)

    def leaves(self) -> list[int]:
        return [i for i, v in enumerate(self.var) if v == LEAF]

    def internal(self) -> list[int]:
        return [i for i, v in enumerate(self.var) if v >= 0]

    def nogs(self) -> list[int]:
        """Internal nodes whose children are both leaves (the prunable nodes)."""
        var = self.var
        return [i for i, v in enumerate(var) if v >= 0
                and var[self.left[i]] == LEAF and var[self.right[i]] == LEAF]

    def is_root_only(self) -> bool:
        return self.var[0] == LEAF

    def max_depth(self) -> int:
        return max(self.depth[i] for i in self.leaves())

    def _alloc(self, parent: int, depth: int) -> int:
        if self.free:
            i = self.free.pop()
            self.var[i] = LEAF
            self.cut[i] = 0.0
            self.left[i] = self.right[i] = -1
            self.parent[i] = parent
            self.depth[i] = depth
            self.value[i] = np.zeros(self.K)
            return i
        self.var.append(LEAF)
        self.cut.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.parent.append(parent)
        self.depth.append(depth)
        self.value.append(np.zeros(self.K))
        return len(self.var) - 1

    def split(self, leaf: int, var: int, cut: float) -> tuple[int, int]:
        if self.var[leaf] != LEAF:
            raise ValueError(f"node {leaf} is not a leaf")
        d = self.depth[leaf] + 1
        lo = self._alloc(leaf, d)
        hi = self._alloc(leaf, d)
        self.var[leaf] = int(var)
        self.cut[leaf] = float(cut)
        self.left[leaf] = lo
        self.right[leaf] = hi
        return lo, hi

    def collapse(self, node: int) -> None:
        lo, hi = self.left[node], self.right[node]
        if self.var[lo] != LEAF or self.var[hi] != LEAF:
            raise ValueError(f"node {node} does not have two leaf children")
        for c in (lo, hi):
            self.var[c] = DEAD
            self.free.append(c)
        self.var[node] = LEAF
        self.left[node] = self.right[node] = -1

    def leaf_of(self, x: np.ndarray) -> int:
        i = 0
        var = self.var
        while var[i] >= 0:
            i = self.left[i] if x[var[i]] <= self.cut[i] else self.right[i]
        return i

    def route(self, x: np.ndarray, node: int = 0, rows: np.ndarray | None = None,
              out: np.ndarray | None = None) -> np.ndarray:
        """Leaf id of each row of ``x`` (restricted to ``rows`` below ``node``)."""
        if out is None:
            out = np.empty(x.shape[0], dtype=np.intp)
        if rows is None:
            rows = np.arange(x.shape[0])
        stack = [(node, rows)]
        var, cut, left, right = self.var, self.cut, self.left, self.right
        while stack:
            i, r = stack.pop()
            if var[i] == LEAF:
                out[r] = i
                continue
            if r.size == 0:
                stack.append((left[i], r))
                stack.append((right[i], r))
                continue
            go_left = x[r, var[i]] <= cut[i]
            stack.append((left[i], r[go_left]))
            stack.append((right[i], r[~go_left]))
        return out

    def subtree_leaves(self, node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            i = stack.pop()
            if self.var[i] == LEAF:
                out.append(i)
            else:
                stack.append(self.left[i])
                stack.append(self.right[i])
        return out

    def value_array(self) -> np.ndarray:
        return np.stack(self.value)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value_array()[self.route(np.atleast_2d(x))]

    def preorder(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            i = stack.pop()
            out.append(i)
            if self.var[i] >= 0:
                stack.append(self.right[i])
                stack.append(self.left[i])
        return out

    def split_counts(self, P: int) -> np.ndarray:
        counts = np.zeros(P, dtype=np.int64)
        for v in self.var:
            if v >= 0:
                counts[v] += 1
        return counts

    def canonical(self) -> tuple["DecisionTree", np.ndarray]:
        """Copy with slots laid out exactly as :func:`tree_from_text` would build them.

        Returns ``(tree, remap)`` where ``remap[old_slot]`` is the new slot
        (``-1`` for recycled slots).  Keeping live trees canonical makes a
        tree restored from text indistinguishable from the original.
        """
        new = DecisionTree(self.K, self.value[0])
        remap = np.full(self.n_slots, -1, dtype=np.intp)
        stack = [(0, 0)]
        while stack:
            old, nid = stack.pop()
            remap[old] = nid
            if self.var[old] >= 0:
                lo, hi = new.split(nid, self.var[old], self.cut[old])
                stack.append((self.right[old], hi))
                stack.append((self.left[old], lo))
            else:
                new.value[nid] = self.value[old].copy()
        return new, remap

    def key(self) -> tuple:
        """Canonical hashable topology (preorder of (var, cut) / leaf markers)."""
        return tuple((self.var[i], self.cut[i]) if self.var[i] >= 0 else ("L",)
                     for i in self.preorder())


@dataclass
class Ensemble:
    """Sum of trees plus a fixed offset.

    ``r(x) = offset + sum_t Tree(x; T_t, M_t)``.  The offset centres the
    ensemble at the link of the marginal mean and is zero unless set by the
    sampler.
    """

    trees: list
    split_probs: np.ndarray
    sigma_lambda: float
    tree_prior: TreePrior = field(default_factory=TreePrior)
    offset: np.ndarray | None = None
    alpha_dirichlet: float = 1.0

    def __post_init__(self):
        self.split_probs = np.asarray(self.split_probs, dtype=float)
        if self.offset is None:
            self.offset = np.zeros(self.K)
        self.offset = np.asarray(self.offset, dtype=float).reshape(self.K)

    @classmethod
    def empty(cls, T: int, P: int, K: int, sigma_lambda: float, tree_prior: TreePrior | None = None,
              offset=None) -> "Ensemble":
        return cls([DecisionTree(K) for _ in range(T)], np.full(P, 1.0 / P), sigma_lambda,
                   tree_prior or TreePrior(), offset)

    @property
    def K(self) -> int:
        return self.trees[0].K if self.trees else 1

    @property
    def T(self) -> int:
        return len(self.trees)

    def split_counts(self, P: int | None = None) -> np.ndarray:
        P = self.split_probs.size if P is None else P
        counts = np.zeros(P, dtype=np.int64)
        for t in self.trees:
            counts += t.split_counts(P)
        return counts

    def leaf_values(self) -> np.ndarray:
        return np.concatenate([np.stack([t.value[i] for i in t.leaves()]).ravel() for t in self.trees]) \
            if self.trees else np.zeros(0)


def ensemble_predict(ensemble: Ensemble, x) -> np.ndarray:
    """``r(x)`` for a single point (returns a ``K``-vector) or a matrix of points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out = np.tile(ensemble.offset, (X.shape[0], 1))
    for t in ensemble.trees:
        out += t.value_array()[t.route(X)]
    return out[0] if single else out


# -- tree prior ---------------------------------------------------------------

def tree_log_prior(tree: DecisionTree, tree_prior: TreePrior, split_probs, cutpoints: Cutpoints) -> float:
    """Log prior of a topology: branching process, Dirichlet-weighted feature
    choice and a uniform cutpoint on the feature's grid."""
    lp = 0.0
    for i, v in enumerate(tree.var):
        if v == DEAD:
            continue
        ps = tree_prior.p_split(tree.depth[i])
        if v == LEAF:
            lp += math.log1p(-ps) if ps < 1 else -math.inf
        else:
            if ps <= 0 or split_probs[v] <= 0:
                return -math.inf
            lp += math.log(ps) + math.log(split_probs[v]) - math.log(cutpoints.sizes[v])
    return lp


def simulate_tree(tree_prior: TreePrior, split_probs, cutpoints: Cutpoints, rng, K: int = 1) -> DecisionTree:
    """Forward-simulate a topology from the prior."""
    tree = DecisionTree(K)
    stack = [0]
    P = len(split_probs)
    while stack:
        i = stack.pop()
        if rng.random() < tree_prior.p_split(tree.depth[i]):
            j = int(rng.choice(P, p=split_probs))
            c = cutpoints.grids[j][rng.integers(cutpoints.sizes[j])]
            lo, hi = tree.split(i, j, c)
            stack.extend((lo, hi))
    return tree


# -- proposals ----------------------------------------------------------------

def move_probabilities(tree: DecisionTree) -> dict:
    if tree.is_root_only():
        return {GROW: 1.0, PRUNE: 0.0, CHANGE: 0.0}
    return dict(MOVE_PROBS)


@dataclass
class Proposal:
    tree: DecisionTree
    log_q_ratio: float
    move: str
    node: int
    children: tuple = ()


def propose_move(tree: DecisionTree, rng, cutpoints: Cutpoints, split_probs) -> Proposal:
    """Draw a GROW, PRUNE or CHANGE proposal.

    Returns the proposed tree (a modified copy) and the exact log proposal
    ratio ``log Q(T' -> T) - log Q(T -> T')``.
    """
    probs = move_probabilities(tree)
    u = rng.random()
    if u < probs[GROW]:
        move = GROW
    elif u < probs[GROW] + probs[PRUNE]:
        move = PRUNE
    else:
        move = CHANGE
    P = len(split_probs)
    new = tree.copy()

    if move == GROW:
        leaves = tree.leaves()
        leaf = leaves[rng.integers(len(leaves))]
        j = int(_choice(rng, split_probs, P))
        c = cutpoints.grids[j][rng.integers(cutpoints.sizes[j])]
        lo, hi = new.split(leaf, j, c)
        # forward: p_G / L * s_j / n_j ; reverse: p_P(T') / nog(T')
        fwd = math.log(probs[GROW]) - math.log(len(leaves)) + math.log(split_probs[j]) - math.log(cutpoints.sizes[j])
        rev = math.log(move_probabilities(new)[PRUNE]) - math.log(len(new.nogs()))
        return Proposal(new, rev - fwd, GROW, leaf, (lo, hi))

    if move == PRUNE:
        nogs = tree.nogs()
        node = nogs[rng.integers(len(nogs))]
        j = tree.var[node]
        kids = (tree.left[node], tree.right[node])
        new.collapse(node)
        fwd = math.log(probs[PRUNE]) - math.log(len(nogs))
        rev = (math.log(move_probabilities(new)[GROW]) - math.log(len(new.leaves()))
               + math.log(split_probs[j]) - math.log(cutpoints.sizes[j]))
        return Proposal(new, rev - fwd, PRUNE, node, kids)

    internal = tree.internal()
    node = internal[rng.integers(len(internal))]
    j_old = tree.var[node]
    j = int(_choice(rng, split_probs, P))
    c = cutpoints.grids[j][rng.integers(cutpoints.sizes[j])]
    new.var[node] = j
    new.cut[node] = float(c)
    fwd = math.log(split_probs[j]) - math.log(cutpoints.sizes[j])
    rev = math.log(split_probs[j_old]) - math.log(cutpoints.sizes[j_old])
    return Proposal(new, rev - fwd, CHANGE, node)


def _choice(rng, p, P):
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, P - 1)


# -- hyperparameters ------------------------------------------------------------

def sample_split_probs(split_counts, alpha_dirichlet: float, rng) -> np.ndarray:
    """Draw ``s ~ Dirichlet(alpha / P + counts)``, computed via log-gammas for
    numerical safety when concentrations are tiny."""
    counts = np.asarray(split_counts, dtype=float)
    P = counts.size
    conc = alpha_dirichlet / P + counts
    # log of a gamma draw; for small shapes use G = G' * U^(1/shape)
    logg = np.log(rng.gamma(conc + 1.0)) + np.log(rng.random(P)) / conc
    logg -= logg.max()
    s = np.exp(logg)
    return s / s.sum()


def log_dirichlet_density(s, conc) -> float:
    from scipy.special import gammaln
    s = np.asarray(s, dtype=float)
    return float(gammaln(conc.sum()) - gammaln(conc).sum() + np.sum((conc - 1) * np.log(s)))


def sample_alpha_dirichlet(split_probs, rng, grid_size: int = 50, a0: float = 0.5, b0: float = 1.0) -> float:
    """Update the Dirichlet concentration on a grid.

    Prior: ``alpha / (alpha + P) ~ Beta(a0, b0)``.  The grid is the
    ``grid_size`` midpoints of ``(0, 1)`` on the ``alpha / (alpha + P)`` scale;
    the discrete full conditional is sampled exactly.
    """
    s = np.asarray(split_probs, dtype=float)
    P = s.size
    logs = np.log(np.maximum(s, 1e-300))
    u = (np.arange(grid_size) + 0.5) / grid_size
    alphas = P * u / (1 - u)
    from scipy.special import gammaln
    ll = gammaln(alphas) - P * gammaln(alphas / P) + (alphas / P - 1) * logs.sum()
    # Beta prior on u plus the Jacobian of alpha -> u is absorbed since the grid is uniform in u
    lp = (a0 - 1) * np.log(u) + (b0 - 1) * np.log1p(-u)
    w = ll + lp
    w = np.exp(w - w.max())
    return float(alphas[rng.choice(grid_size, p=w / w.sum())])


def half_cauchy_logpdf(sigma: float, scale: float) -> float:
    return math.log(2.0 / (math.pi * scale)) - math.log1p((sigma / scale) ** 2)


def slice_sample(logf, x0: float, rng, width: float = 1.0, max_steps: int = 50) -> float:
    """One univariate slice-sampling update with stepping out and shrinkage."""
    f0 = logf(x0)
    logy = f0 + math.log(rng.random())
    u = rng.random()
    lo = x0 - width * u
    hi = lo + width
    j = int(rng.random() * max_steps)
    k = max_steps - 1 - j
    while j > 0 and logf(lo) > logy:
        lo -= width
        j -= 1
    while k > 0 and logf(hi) > logy:
        hi += width
        k -= 1
    while True:
        x1 = lo + rng.random() * (hi - lo)
        if logf(x1) > logy:
            return x1
        if x1 < x0:
            lo = x1
        else:
            hi = x1
        if hi - lo < 1e-14 * max(1.0, abs(x0)):
            return x0


def leaf_values_loglik(leaf_values, sigma: float, leaf_prior: str = "loggamma") -> float:
    """Log density of iid leaf values under the sigma-indexed leaf prior."""
    lam = np.asarray(leaf_values, dtype=float)
    if lam.size == 0:
        return 0.0
    if leaf_prior == "normal":
        return float(-lam.size * math.log(sigma) - 0.5 * np.sum(lam ** 2) / sigma ** 2
                     - 0.5 * lam.size * math.log(2 * math.pi))
    from scipy.special import gammaln
    pr = leaf_prior_from_sigma(sigma)
    return float(lam.size * (pr.a * pr.log_b - gammaln(pr.a)) + pr.a * lam.sum() - pr.b * np.exp(lam).sum())


def sample_sigma_lambda(leaf_values, scale: float, rng, current: float | None = None,
                        leaf_prior: str = "loggamma", width: float = 1.0, max_steps: int = 50) -> float:
    """Slice-sample ``sigma_lambda`` on the log scale under a half-Cauchy(scale) prior.

    The likelihood treats every leaf value as an iid draw from the leaf
    prior indexed by sigma (zero-mean log-gamma, or normal for the power model).
    """
    lam = np.asarray(leaf_values, dtype=float).ravel()
    n = lam.size
    sum_lam = float(lam.sum())
    sum_sq = float(np.sum(lam ** 2))
    exp_lam = np.exp(lam) if leaf_prior != "normal" else None
    sum_exp = float(exp_lam.sum()) if exp_lam is not None else 0.0
    from scipy.special import gammaln

    def logf(u):
        if u > 30 or u < -40:
            return -math.inf
        sigma = math.exp(u)
        lp = half_cauchy_logpdf(sigma, scale) + u
        if n == 0:
            return lp
        if leaf_prior == "normal":
            return lp - n * u - 0.5 * sum_sq / sigma ** 2
        try:
            pr = leaf_prior_from_sigma(sigma)
        except Exception:
            return -math.inf
        return lp + n * (pr.a * pr.log_b - float(gammaln(pr.a))) + pr.a * sum_lam - pr.b * sum_exp

    x0 = math.log(current if current is not None else scale)
    return math.exp(slice_sample(logf, x0, rng, width=width, max_steps=max_steps))


# -- text serialization ----------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def tree_to_text(tree: DecisionTree) -> str:
    """Preorder record: ``[j,c]`` for internal nodes, ``{v1,...,vK}`` for leaves."""
    parts = []
    for i in tree.preorder():
        if tree.var[i] >= 0:
            parts.append(f"[{tree.var[i]},{_fmt(tree.cut[i])}]")
        else:
            parts.append("{" + ",".join(_fmt(v) for v in tree.value[i]) + "}")
    return " ".join(parts)


def tree_from_text(line: str, K: int | None = None) -> DecisionTree:
    tokens = line.split()
    if not tokens:
        raise ValueError("empty tree record")
    if K is None:
        first_leaf = next(t for t in tokens if t.startswith("{"))
        K = len(first_leaf.strip("{}").split(","))
    tree = DecisionTree(K)
    pos = 0

    def build(node: int):
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("truncated tree record")
        tok = tokens[pos]
        pos += 1
        if tok.startswith("["):
            j, c = tok.strip("[]").split(",")
            lo, hi = tree.split(node, int(j), float(c))
            build(lo)
            build(hi)
        elif tok.startswith("{"):
            vals = [float(v) for v in tok.strip("{}").split(",")]
            if len(vals) != K:
                raise ValueError(f"leaf has {len(vals)} values, expected {K}")
            tree.value[node] = np.array(vals)
        else:
            raise ValueError(f"bad token {tok!r}")

    build(0)
    if pos != len(tokens):
        raise ValueError("trailing tokens in tree record")
    return tree


def ensemble_to_text(ensemble: Ensemble) -> str:
    """Header line with T, K and the offset, then one tree per line."""
    head = (f"ensemble T={ensemble.T} K={ensemble.K} "
            f"offset={','.join(_fmt(v) for v in ensemble.offset)} "
            f"sigma_lambda={_fmt(ensemble.sigma_lambda)} "
            f"split_probs={','.join(_fmt(v) for v in ensemble.split_probs)} "
            f"alpha={_fmt(ensemble.alpha_dirichlet)} "
            f"gamma={_fmt(ensemble.tree_prior.gamma_base)} beta={_fmt(ensemble.tree_prior.beta_depth)}")
    return "\n".join([head] + [tree_to_text(t) for t in ensemble.trees]) + "\n"


def _parse_header(line: str) -> dict:
    fields = line.split()
    if not fields or fields[0] != "ensemble":
        raise ValueError(f"expected an ensemble header, got {line[:40]!r}")
    return dict(f.split("=", 1) for f in fields[1:])


def ensembles_from_text(text: str) -> list[Ensemble]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    out = []
    pos = 0
    while pos < len(lines):
        h = _parse_header(lines[pos])
        T, K = int(h["T"]), int(h["K"])
        trees = [tree_from_text(lines[pos + 1 + t], K) for t in range(T)]
        pos += 1 + T
        out.append(Ensemble(
            trees=trees,
            split_probs=np.array([float(v) for v in h["split_probs"].split(",")]),
            sigma_lambda=float(h["sigma_lambda"]),
            tree_prior=TreePrior(float(h.get("gamma", 0.95)), float(h.get("beta", 2.0))),
            offset=np.array([float(v) for v in h["offset"].split(",")]),
            alpha_dirichlet=float(h.get("alpha", 1.0)),
        ))
    return out


def ensemble_from_text(text: str) -> Ensemble:
    ens = ensembles_from_text(text)
    if len(ens) != 1:
        raise ValueError(f"expected one ensemble, found {len(ens)}")
    return ens[0]
