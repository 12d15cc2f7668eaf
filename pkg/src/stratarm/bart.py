"""Bayesian sum-of-trees regression of Y on (arm, X) and potential-outcome imputation.

A single model is fit on all subjects with the treatment entering as indicator
columns; each subject's potential outcome under arm ``a`` is the posterior-mean
prediction with the treatment block forced to ``a``. Backfitting uses
grow/prune/change proposals with leaf means integrated out, trees kept in a
flat heap layout for speed. The outcome is internally centered at its mean and
scaled by its range (so a fresh all-stump ensemble predicts the data mean) and
all randomness flows through one seeded generator; fits are invariant to the
row order of the dataset because rows are canonically sorted internally.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .data import Dataset

_UNUSED = -2
_LEAF = -1


@dataclass(frozen=True)
class TreeEnsembleConfig:
    """Sum-of-trees sampler settings (package-convention defaults)."""

    n_trees: int = 200
    base: float = 0.95
    power: float = 2.0
    leaf_shrinkage: float = 2.0
    sigma_dof: float = 3.0
    sigma_quantile: float = 0.90
    iterations: int = 6000
    burn_in: int = 1000
    seed: int = 0
    n_cutpoints: int = 100
    max_depth: int = 10
    p_grow: float = 0.5
    p_prune: float = 0.25
    p_change: float = 0.25

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.base < 1.0:
            raise ValueError("base must lie in (0, 1)")
        if self.power <= 0:
            raise ValueError("power must be positive")
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.leaf_shrinkage <= 0 or self.sigma_dof <= 0:
            raise ValueError("leaf_shrinkage and sigma_dof must be positive")
        if not 0.0 < self.sigma_quantile < 1.0:
            raise ValueError("sigma_quantile must lie in (0, 1)")
        if not math.isclose(self.p_grow + self.p_prune + self.p_change, 1.0):
            raise ValueError("proposal probabilities must sum to 1")


def stage1_design(ds: Dataset, arm: int | None = None) -> np.ndarray:
    """Design matrix: continuous block, discrete indicators, K-1 arm indicators.

    ``arm`` forces every subject's treatment block to that arm.
    """
    cols = [ds.x_cont]
    for j, spec in enumerate(ds.schema.discrete):
        codes = ds.x_disc[:, j]
        if spec.categories == 2:
            cols.append((codes == 2).astype(float)[:, None])
        else:
            cols.append(np.stack([(codes == k).astype(float)
                                  for k in range(1, spec.categories + 1)], axis=1))
    a = ds.treatment if arm is None else np.full(ds.n, arm, dtype=np.int64)
    if arm is not None and not 1 <= arm <= ds.n_arms:
        raise ValueError(f"arm {arm} outside 1..{ds.n_arms}")
    cols.append(np.stack([(a == lvl).astype(float) for lvl in range(2, ds.n_arms + 1)], axis=1))
    return np.ascontiguousarray(np.hstack(cols))


def _cutpoint_grids(x: np.ndarray, n_cutpoints: int) -> list[np.ndarray]:
    grids = []
    for j in range(x.shape[1]):
        uniq = np.unique(x[:, j])
        if uniq.size < 2:
            grids.append(np.empty(0))
        elif uniq.size == 2:
            grids.append(np.array([uniq.mean()]))
        else:
            grids.append(np.linspace(uniq[0], uniq[-1], n_cutpoints + 2)[1:-1])
    return grids


class TreeEnsembleSampler:
    """Mutable sampler state; most callers want :func:`fit_sum_of_trees` instead."""

    def __init__(self, x: np.ndarray, y: np.ndarray, cfg: TreeEnsembleConfig):
        n, p = x.shape
        if n < 10:
            raise ValueError("sum-of-trees fitting needs at least 10 subjects")
        self.cfg = cfg
        self.x = x
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))

        self.center = float(y.mean())
        spread = float(y.max() - y.min())
        if spread == 0.0:
            warnings.warn("outcome has zero variance; the fit will be constant", stacklevel=3)
            spread = 1.0
        self.scale = spread
        self.y = (y - self.center) / self.scale

        m = cfg.n_trees
        self.sigma_mu = 0.5 / (cfg.leaf_shrinkage * math.sqrt(m))
        s2 = float(np.var(self.y, ddof=1))
        s2 = max(s2, 1e-12)
        self.lam = chi2.ppf(1.0 - cfg.sigma_quantile, cfg.sigma_dof) * s2 / cfg.sigma_dof
        self.sigma2 = s2

        heap = 1 << (cfg.max_depth + 1)
        self.heap = heap
        self.state = np.zeros((m, heap), dtype=np.int8)
        self.state[:, 1] = 1
        self.var = np.full((m, heap), _UNUSED, dtype=np.int16)
        self.cut = np.zeros((m, heap))
        self.leaf = np.zeros((m, heap))
        self.leaf_idx = np.ones((m, n), dtype=np.int32)
        self.total_fit = np.zeros(n)

        self.grids = _cutpoint_grids(x, cfg.n_cutpoints)
        depth = np.zeros(heap, dtype=np.int64)
        depth[1:] = np.floor(np.log2(np.arange(1, heap))).astype(np.int64)
        self.depth = depth
        psplit = cfg.base / (1.0 + np.arange(cfg.max_depth + 2)) ** cfg.power
        psplit[cfg.max_depth:] = 0.0
        self.psplit = psplit

    # --- integrated leaf likelihood -----------------------------------------

    def _leaf_loglik(self, n_l, s_l) -> float:
        v = self.sigma2 + n_l * self.sigma_mu ** 2
        return float(np.sum(0.5 * np.log(self.sigma2 / v)
                            + self.sigma_mu ** 2 * np.asarray(s_l) ** 2 / (2 * self.sigma2 * v)))

    # --- proposals ----------------------------------------------------------

    def _growable(self, t: int, counts: np.ndarray) -> np.ndarray:
        leaves = np.flatnonzero(self.state[t] == 1)
        return leaves[(counts[leaves] >= 2) & (self.depth[leaves] < self.cfg.max_depth)]

    def _nog_nodes(self, t: int) -> np.ndarray:
        internal = np.flatnonzero(self.state[t] == 2)
        return internal[(self.state[t, 2 * internal] == 1) & (self.state[t, 2 * internal + 1] == 1)]

    def _update_tree(self, t: int) -> None:
        cfg = self.cfg
        rng = self.rng
        tree_fit = self.leaf[t, self.leaf_idx[t]]
        resid = self.y - self.total_fit + tree_fit
        counts = np.bincount(self.leaf_idx[t], minlength=self.heap)

        move = rng.random()
        if move < cfg.p_grow:
            self._grow(t, resid, counts)
        elif move < cfg.p_grow + cfg.p_prune:
            self._prune(t, resid, counts)
        else:
            self._change(t, resid, counts)

        # redraw all leaf means given sigma2, then refresh the running fit
        leaves = np.flatnonzero(self.state[t] == 1)
        counts = np.bincount(self.leaf_idx[t], minlength=self.heap)
        sums = np.bincount(self.leaf_idx[t], weights=resid, minlength=self.heap)
        v = self.sigma2 * self.sigma_mu ** 2 / (self.sigma2 + counts[leaves] * self.sigma_mu ** 2)
        mean = self.sigma_mu ** 2 * sums[leaves] / (self.sigma2 + counts[leaves] * self.sigma_mu ** 2)
        self.leaf[t, leaves] = mean + np.sqrt(v) * rng.standard_normal(leaves.size)
        self.total_fit += self.leaf[t, self.leaf_idx[t]] - tree_fit

    def _grow(self, t, resid, counts) -> None:
        rng = self.rng
        growable = self._growable(t, counts)
        if growable.size == 0:
            return
        node = int(growable[rng.integers(growable.size)])
        var = int(rng.integers(self.x.shape[1]))
        grid = self.grids[var]
        if grid.size == 0:
            return
        cut = float(grid[rng.integers(grid.size)])
        rows = np.flatnonzero(self.leaf_idx[t] == node)
        go_right = self.x[rows, var] > cut
        n_r = int(go_right.sum())
        n_l = rows.size - n_r
        if n_l == 0 or n_r == 0:
            return
        s = resid[rows]
        s_r = float(s[go_right].sum())
        s_l = float(s.sum()) - s_r

        d = self.depth[node]
        log_prior = (math.log(self.psplit[d]) + 2.0 * math.log1p(-self.psplit[d + 1])
                     - math.log1p(-self.psplit[d]))
        parent_was_nog = node > 1 and self.state[t, node ^ 1] == 1
        n_nog_after = self._nog_nodes(t).size + 1 - int(parent_was_nog)
        log_trans = (math.log(self.cfg.p_prune / n_nog_after)
                     - math.log(self.cfg.p_grow / growable.size))
        log_lik = (self._leaf_loglik(np.array([n_l, n_r]), np.array([s_l, s_r]))
                   - self._leaf_loglik(np.array([rows.size]), np.array([s_l + s_r])))
        if math.log(rng.random()) < log_lik + log_prior + log_trans:
            self.state[t, node] = 2
            self.var[t, node] = var
            self.cut[t, node] = cut
            self.state[t, 2 * node] = 1
            self.state[t, 2 * node + 1] = 1
            self.leaf_idx[t, rows] = 2 * node + go_right

    def _prune(self, t, resid, counts) -> None:
        rng = self.rng
        nog = self._nog_nodes(t)
        if nog.size == 0:
            return
        node = int(nog[rng.integers(nog.size)])
        left, right = 2 * node, 2 * node + 1
        sums = np.bincount(self.leaf_idx[t], weights=resid, minlength=self.heap)
        n_l, n_r = counts[left], counts[right]
        s_l, s_r = sums[left], sums[right]

        d = self.depth[node]
        log_prior = -(math.log(self.psplit[d]) + 2.0 * math.log1p(-self.psplit[d + 1])
                      - math.log1p(-self.psplit[d]))
        growable = self._growable(t, counts)
        n_grow_after = (growable.size + 1
                        - int(left in growable) - int(right in growable))
        log_trans = (math.log(self.cfg.p_grow / n_grow_after)
                     - math.log(self.cfg.p_prune / nog.size))
        log_lik = (self._leaf_loglik(np.array([n_l + n_r]), np.array([s_l + s_r]))
                   - self._leaf_loglik(np.array([n_l, n_r]), np.array([s_l, s_r])))
        if math.log(rng.random()) < log_lik + log_prior + log_trans:
            self.state[t, node] = 1
            self.var[t, node] = _UNUSED
            self.state[t, left] = 0
            self.state[t, right] = 0
            rows = np.flatnonzero((self.leaf_idx[t] == left) | (self.leaf_idx[t] == right))
            self.leaf_idx[t, rows] = node

    def _change(self, t, resid, counts) -> None:
        rng = self.rng
        nog = self._nog_nodes(t)
        if nog.size == 0:
            return
        node = int(nog[rng.integers(nog.size)])
        var = int(rng.integers(self.x.shape[1]))
        grid = self.grids[var]
        if grid.size == 0:
            return
        cut = float(grid[rng.integers(grid.size)])
        left, right = 2 * node, 2 * node + 1
        rows = np.flatnonzero((self.leaf_idx[t] == left) | (self.leaf_idx[t] == right))
        go_right = self.x[rows, var] > cut
        n_r = int(go_right.sum())
        n_l = rows.size - n_r
        if n_l == 0 or n_r == 0:
            return
        s = resid[rows]
        s_r_new = float(s[go_right].sum())
        s_l_new = float(s.sum()) - s_r_new
        sums = np.bincount(self.leaf_idx[t], weights=resid, minlength=self.heap)
        log_lik = (self._leaf_loglik(np.array([n_l, n_r]), np.array([s_l_new, s_r_new]))
                   - self._leaf_loglik(np.array([counts[left], counts[right]]),
                                       np.array([sums[left], sums[right]])))
        if math.log(rng.random()) < log_lik:
            self.var[t, node] = var
            self.cut[t, node] = cut
            self.leaf_idx[t, rows] = 2 * node + go_right

    # --- full sweeps ----------------------------------------------------------

    def step(self) -> None:
        """One backfitting sweep over all trees plus the variance update."""
        for t in range(self.cfg.n_trees):
            self._update_tree(t)
        resid = self.y - self.total_fit
        shape = self.cfg.sigma_dof + self.y.size
        self.sigma2 = float((self.cfg.sigma_dof * self.lam + resid @ resid)
                            / self.rng.chisquare(shape))
        self.sigma2 = max(self.sigma2, 1e-300)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Compact copy of the current forest: heap offsets, split vars, values."""
        m = self.cfg.n_trees
        offsets = np.zeros(m + 1, dtype=np.int64)
        vars_, vals = [], []
        for t in range(m):
            active = np.flatnonzero(self.state[t] > 0)
            top = int(active[-1]) + 1
            v = self.var[t, :top].copy()
            v[self.state[t, :top] == 1] = _LEAF
            vals.append(np.where(self.state[t, :top] == 1,
                                 self.leaf[t, :top], self.cut[t, :top]))
            vars_.append(v)
            offsets[t + 1] = offsets[t] + top
        return offsets, np.concatenate(vars_), np.concatenate(vals)

    def predict_current(self, x: np.ndarray) -> np.ndarray:
        """Prediction of the live ensemble at rows ``x`` (original outcome scale)."""
        offsets, var, val = self.snapshot()
        return self.center + self.scale * _forest_eval(offsets, var, val, x)


def _tree_eval(var: np.ndarray, val: np.ndarray, x: np.ndarray, out: np.ndarray) -> None:
    pos = np.ones(x.shape[0], dtype=np.int64)
    active = np.arange(x.shape[0])
    while active.size:
        p = pos[active]
        v = var[p]
        at_leaf = v == _LEAF
        if at_leaf.any():
            done = active[at_leaf]
            out[done] += val[pos[done]]
            active = active[~at_leaf]
            if active.size == 0:
                break
            p = pos[active]
            v = var[p]
        go_right = x[active, v] > val[p]
        pos[active] = 2 * p + go_right


def _forest_eval(offsets, var, val, x) -> np.ndarray:
    out = np.zeros(x.shape[0])
    for t in range(offsets.size - 1):
        sl = slice(offsets[t], offsets[t + 1])
        _tree_eval(var[sl], val[sl], x, out)
    return out


@dataclass
class TreeEnsembleDraws:
    """Retained posterior draws of the forest plus the error-variance trace."""

    config: TreeEnsembleConfig
    center: float
    scale: float
    n_columns: int
    sigma2: np.ndarray
    snapshots: list[tuple[np.ndarray, np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.snapshots)

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        """Posterior-mean prediction at rows ``x``."""
        if not self.snapshots:
            raise ValueError("no retained draws")
        if x.shape[1] != self.n_columns:
            raise ValueError(f"design has {x.shape[1]} columns, expected {self.n_columns}")
        x = np.ascontiguousarray(x, dtype=float)
        total = np.zeros(x.shape[0])
        for offsets, var, val in self.snapshots:
            total += _forest_eval(offsets, var, val, x)
        return self.center + self.scale * total / len(self.snapshots)

    def predict_draw(self, i: int, x: np.ndarray) -> np.ndarray:
        offsets, var, val = self.snapshots[i]
        return self.center + self.scale * _forest_eval(offsets, var, val,
                                                       np.ascontiguousarray(x, dtype=float))


def fit_sum_of_trees(ds: Dataset, cfg: TreeEnsembleConfig) -> TreeEnsembleDraws:
    """Run the backfitting sampler and keep every post-burn-in draw."""
    x = stage1_design(ds)
    y = ds.outcome.astype(float)
    order = np.lexsort(tuple(x.T) + (y, ds.treatment))
    sampler = TreeEnsembleSampler(np.ascontiguousarray(x[order]), y[order], cfg)
    sigma2 = np.empty(cfg.iterations - cfg.burn_in)
    snapshots = []
    for it in range(cfg.iterations):
        sampler.step()
        if it >= cfg.burn_in:
            sigma2[it - cfg.burn_in] = sampler.sigma2 * sampler.scale ** 2
            snapshots.append(sampler.snapshot())
    return TreeEnsembleDraws(
        config=cfg,
        center=sampler.center,
        scale=sampler.scale,
        n_columns=x.shape[1],
        sigma2=sigma2,
        snapshots=snapshots,
    )


@dataclass(frozen=True)
class PotentialOutcomeMatrix:
    """Posterior-mean predictions under every arm, one column per arm."""

    values: np.ndarray
    arms: tuple[int, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.arms):
            raise ValueError("need one column per arm")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("potential-outcome matrix has non-finite entries")
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def impute_potential_outcomes(draws: TreeEnsembleDraws, ds: Dataset,
                              arms: tuple[int, ...] | None = None) -> PotentialOutcomeMatrix:
    """Predict every subject's outcome with the treatment forced to each arm."""
    if len(draws) == 0:
        raise ValueError("no posterior draws to average")
    if arms is None:
        arms = tuple(range(1, ds.n_arms + 1))
    values = np.empty((ds.n, len(arms)))
    for j, a in enumerate(arms):
        values[:, j] = draws.predict_mean(stage1_design(ds, arm=int(a)))
    return PotentialOutcomeMatrix(values=values, arms=tuple(int(a) for a in arms))
