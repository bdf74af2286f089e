"""Sampling-based valuation: LOO, TMC-Shapley, G-Shapley, Banzhaf (MSR), CS-Shapley.

Every sampled permutation or subset derives its own generator from
``(seed, task index)``, and reductions run in task-index order, so results do
not depend on ``n_jobs``.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .._kernels import sgd_pass
from ..data import TabularDataset
from ..errors import InsufficientSamples
from ..learners import TrainConfig, fit_arrays, fresh_model, init_weights
from .exact import check_classes, class_conditional_utility
from .utility import Utility
from .values import ValuationConfig, ValueVector, config_digest

CONVERGENCE_WINDOW = 10
MIN_BUCKET = 10

_WORKER_STATE = None


def _init_worker(state):
    global _WORKER_STATE
    _WORKER_STATE = state


def _call_in_worker(args):
    fn, task = args
    return fn(_WORKER_STATE, task)


def map_tasks(fn: Callable, state, tasks: Sequence, n_jobs: int = 1) -> list:
    """``[fn(state, t) for t in tasks]``, optionally across worker processes."""
    if n_jobs <= 1 or len(tasks) <= 1:
        return [fn(state, t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker, initargs=(state,)) as ex:
        return list(ex.map(_call_in_worker, [(fn, t) for t in tasks]))


def _chunks(start: int, stop: int, size: int) -> list[range]:
    return [range(a, min(a + size, stop)) for a in range(start, stop, size)]


def _summary(samples: np.ndarray):
    mean = samples.mean(axis=0)
    if samples.shape[0] > 1:
        se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    else:
        se = np.full(samples.shape[1], np.nan)
    return mean, se


def _digest(vconfig: ValuationConfig, tconfig: TrainConfig | None, technique: str) -> str:
    parts = [{"technique": technique}, vconfig.to_dict()]
    if tconfig is not None:
        parts.append(tconfig.to_dict())
    return config_digest(*parts)


# ---------------------------------------------------------------- LOO


def value_loo(train: TabularDataset, test: TabularDataset, tconfig: TrainConfig = TrainConfig()) -> ValueVector:
    """V(D) - V(D minus i) for every training datum (n + 1 trainings)."""
    if train.n < 2:
        raise ValueError("LOO needs at least two training points")
    utility = Utility(train, test, tconfig)
    full = utility.full()
    everyone = np.arange(train.n)
    values = np.array([full - utility(np.delete(everyone, i)) for i in range(train.n)])
    return ValueVector(
        train.datum_ids, values, "loo", seed=tconfig.seed, n_samples=train.n + 1,
        config_digest=config_digest({"technique": "loo"}, tconfig.to_dict()),
        utility_full=full, utility_empty=utility.empty,
    )


# ---------------------------------------------------------------- TMC


def permutation_rng(seed: int, index: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), *more])


def tmc_marginals(utility: Utility, perm: np.ndarray, tolerance: float, v_full: float) -> np.ndarray:
    """Marginal contributions along one permutation.

    After each step the prefix utility is compared with V(D); once it is
    strictly within ``tolerance`` the remaining data get 0.
    """
    marginals = np.zeros(utility.n)
    prev = utility.empty
    for pos in range(len(perm)):
        cur = utility(perm[: pos + 1])
        marginals[perm[pos]] = cur - prev
        prev = cur
        if abs(cur - v_full) < tolerance:
            break
    return marginals


def _tmc_task(state, block: range) -> np.ndarray:
    utility, seed, tolerance, v_full = state
    out = np.empty((len(block), utility.n))
    for row, t in enumerate(block):
        perm = permutation_rng(seed, t).permutation(utility.n)
        out[row] = tmc_marginals(utility, perm, tolerance, v_full)
    return out


def _converged(history: np.ndarray, threshold: float) -> int | None:
    """First permutation count T at which the running mean moved less than
    ``threshold`` (max over data) across the last CONVERGENCE_WINDOW draws."""
    csum = np.cumsum(history, axis=0)
    counts = np.arange(1, len(history) + 1)[:, None]
    running = csum / counts
    for t in range(2 * CONVERGENCE_WINDOW, len(history) + 1):
        change = np.max(np.abs(running[t - 1] - running[t - 1 - CONVERGENCE_WINDOW]))
        if change < threshold:
            return t
    return None


def _sample_marginals(task, state, total: int, vconfig: ValuationConfig, n_jobs: int, block: int):
    """Run ``total`` sampled tasks in blocks, honouring the convergence stop."""
    rows = []
    done = 0
    batch = max(block * max(n_jobs, 1), block)
    while done < total:
        stop = total if vconfig.convergence_threshold is None else min(total, done + batch)
        parts = map_tasks(task, state, _chunks(done, stop, block), n_jobs)
        rows.extend(parts)
        done = stop
        if vconfig.convergence_threshold is not None:
            history = np.concatenate(rows)
            hit = _converged(history, vconfig.convergence_threshold)
            if hit is not None:
                return history[:hit]
    return np.concatenate(rows)


def value_tmc_shapley(
    train: TabularDataset,
    test: TabularDataset,
    vconfig: ValuationConfig = ValuationConfig(),
    tconfig: TrainConfig = TrainConfig(),
    n_jobs: int = 1,
    utility: Utility | None = None,
) -> ValueVector:
    """Truncated Monte Carlo Shapley with per-datum standard errors."""
    if train.n < 2:
        raise ValueError("TMC-Shapley needs at least two training points")
    utility = utility or Utility(train, test, tconfig)
    v_full = utility.full()
    state = (utility, vconfig.seed, vconfig.truncation_tolerance, v_full)
    history = _sample_marginals(_tmc_task, state, vconfig.n_permutations, vconfig, n_jobs, block=25)
    mean, se = _summary(history)
    return ValueVector(
        train.datum_ids, mean, "tmc", seed=vconfig.seed, n_samples=history.shape[0],
        config_digest=_digest(vconfig, tconfig, "tmc"), utility_full=v_full,
        utility_empty=utility.empty, stderr=se,
    )


# ---------------------------------------------------------------- G-Shapley


def _g_task(state, block: range) -> np.ndarray:
    zb, yidx, test_zb, test_y, d, k_rows, seed, lr = state
    n = len(yidx)
    out = np.empty((len(block), n))
    for row, t in enumerate(block):
        rng = permutation_rng(seed, t)
        perm = rng.permutation(n)
        w0 = init_weights(k_rows, d, [int(seed), int(t), 1])
        snaps = sgd_pass(zb, yidx, perm.astype(np.int64), w0, lr)
        logits = np.einsum("tkp,mp->tmk", snaps, test_zb)
        correct = np.count_nonzero(np.argmax(logits, axis=2) == test_y, axis=1)
        out[row, perm] = np.diff(correct) / len(test_y)
    return out


def g_shapley_marginals(train: TabularDataset, test: TabularDataset, learning_rate: float, seed: int, index: int):
    """Marginals of one permutation plus the accuracies before and after the pass."""
    state = _g_state(train, test, learning_rate, seed)
    zb, yidx, test_zb, test_y, d, k_rows, _, lr = state
    rng = permutation_rng(seed, index)
    perm = rng.permutation(len(yidx))
    w0 = init_weights(k_rows, d, [int(seed), int(index), 1])
    snaps = sgd_pass(zb, yidx, perm.astype(np.int64), w0, lr)
    logits = np.einsum("tkp,mp->tmk", snaps[[0, -1]], test_zb)
    acc = (np.argmax(logits, axis=2) == test_y).mean(axis=1)
    return _g_task(state, range(index, index + 1))[0], float(acc[0]), float(acc[1])


def _g_state(train, test, learning_rate, seed):
    model = fresh_model(train, 0)
    zb = model.standardize(train.features)
    test_zb = model.standardize(test.features)
    return (
        np.ascontiguousarray(zb), train.labels.astype(np.int64), test_zb, test.labels.astype(np.int64),
        train.d, train.n_classes, seed, float(learning_rate),
    )


def value_g_shapley(
    train: TabularDataset,
    test: TabularDataset,
    vconfig: ValuationConfig = ValuationConfig(),
    learning_rate: float | None = None,
    tconfig: TrainConfig | None = None,
    n_jobs: int = 1,
) -> ValueVector:
    """Gradient Shapley: one SGD step per datum along each permutation.

    Each permutation starts from a freshly seeded model standardized by the
    training-set statistics; a datum's marginal is the test-accuracy change
    its step causes.
    """
    if train.n < 1:
        raise ValueError("G-Shapley needs at least one training point")
    lr = vconfig.g_learning_rate if learning_rate is None else learning_rate
    state = _g_state(train, test, lr, vconfig.seed)
    history = _sample_marginals(_g_task, state, vconfig.n_permutations, vconfig, n_jobs, block=50)
    mean, se = _summary(history)
    tconfig = tconfig or TrainConfig()
    v_full = float(np.mean(fit_arrays(train.features, train.labels, train.n_classes, tconfig).predict(test.features) == test.labels))
    return ValueVector(
        train.datum_ids, mean, "gshapley", seed=vconfig.seed, n_samples=history.shape[0],
        config_digest=_digest(vconfig, tconfig, "gshapley"), utility_full=v_full,
        utility_empty=1.0 / train.n_classes, stderr=se, extra={"g_learning_rate": lr},
    )


# ---------------------------------------------------------------- Banzhaf


def _banzhaf_task(state, block: range):
    utility, seed = state
    incl = np.empty((len(block), utility.n), dtype=bool)
    util = np.empty(len(block))
    for row, s in enumerate(block):
        incl[row] = permutation_rng(seed, s).random(utility.n) < 0.5
        util[row] = utility(np.nonzero(incl[row])[0])
    return incl, util


def msr_estimate(incl: np.ndarray, util: np.ndarray):
    """Maximum-sample-reuse Banzhaf estimate from sampled subsets.

    Returns ``(values, stderr, n_in, n_out)``; every sample updates every
    datum's in- or out-bucket.
    """
    n_in = incl.sum(axis=0)
    n_out = incl.shape[0] - n_in
    if np.any(n_in == 0) or np.any(n_out == 0):
        raise InsufficientSamples("a datum's in- or out-bucket is empty; draw more subsets")
    u = util[:, None]
    mean_in = (incl * u).sum(axis=0) / n_in
    mean_out = (~incl * u).sum(axis=0) / n_out
    var_in = (incl * (u - mean_in) ** 2).sum(axis=0) / np.maximum(n_in - 1, 1)
    var_out = (~incl * (u - mean_out) ** 2).sum(axis=0) / np.maximum(n_out - 1, 1)
    se = np.sqrt(var_in / n_in + var_out / n_out)
    return mean_in - mean_out, se, n_in, n_out


def value_banzhaf(
    train: TabularDataset,
    test: TabularDataset,
    vconfig: ValuationConfig = ValuationConfig(),
    tconfig: TrainConfig = TrainConfig(),
    n_jobs: int = 1,
    utility: Utility | None = None,
) -> ValueVector:
    """Banzhaf values; exact enumeration for n <= 14 in ``auto`` mode, else MSR sampling."""
    from .exact import MAX_EXACT_N, banzhaf_from_table, utility_table

    if train.n < 2:
        raise ValueError("Banzhaf needs at least two training points")
    utility = utility or Utility(train, test, tconfig)
    mode = vconfig.banzhaf_mode
    if mode == "auto":
        mode = "exact" if train.n <= MAX_EXACT_N else "msr"
    digest = _digest(vconfig, tconfig, "banzhaf")
    if mode == "exact":
        table = utility_table(utility, train.n)
        return ValueVector(
            train.datum_ids, banzhaf_from_table(table, train.n), "banzhaf", seed=vconfig.seed,
            n_samples=1 << train.n, config_digest=digest, utility_full=float(table[-1]),
            utility_empty=float(table[0]), stderr=np.zeros(train.n), extra={"mode": "exact"},
        )
    parts = map_tasks(_banzhaf_task, (utility, vconfig.seed), _chunks(0, vconfig.banzhaf_n_subsets, 250), n_jobs)
    incl = np.concatenate([p[0] for p in parts])
    util = np.concatenate([p[1] for p in parts])
    values, se, n_in, n_out = msr_estimate(incl, util)
    flags = ()
    thin = np.minimum(n_in, n_out) < MIN_BUCKET
    if thin.any():
        flags = (f"{int(thin.sum())} data have fewer than {MIN_BUCKET} samples in a bucket",)
    return ValueVector(
        train.datum_ids, values, "banzhaf", seed=vconfig.seed, n_samples=len(util), config_digest=digest,
        utility_full=utility.full(), utility_empty=utility.empty, stderr=se, flags=flags,
        extra={"mode": "msr"},
    )


# ---------------------------------------------------------------- CS-Shapley


def cs_round(utility: Utility, c: int, rng: np.random.Generator) -> np.ndarray:
    """Marginals of class-``c`` data for one conditioning draw and ordering."""
    inside = np.nonzero(utility.y == c)[0]
    outside = np.nonzero(utility.y != c)[0]
    cond = outside[rng.random(len(outside)) < 0.5]
    order = inside[rng.permutation(len(inside))]
    marginals = np.zeros(len(inside))
    prev = class_conditional_utility(utility.correct(cond), utility.test_y, c, utility.n_classes)
    for pos in range(len(order)):
        cur = class_conditional_utility(
            utility.correct(np.concatenate([cond, order[: pos + 1]])), utility.test_y, c, utility.n_classes
        )
        marginals[np.searchsorted(inside, order[pos])] = cur - prev
        prev = cur
    return marginals


def _cs_task(state, block: range):
    utility, seed, c = state
    return np.stack([cs_round(utility, c, permutation_rng(seed, r, c)) for r in block])


def value_cs_shapley(
    train: TabularDataset,
    test: TabularDataset,
    vconfig: ValuationConfig = ValuationConfig(),
    tconfig: TrainConfig = TrainConfig(),
    n_jobs: int = 1,
    utility: Utility | None = None,
) -> ValueVector:
    """Class-wise Shapley: in-class permutations conditioned on random out-of-class sets.

    ``n_permutations`` rounds are drawn per class.
    """
    utility = utility or Utility(train, test, tconfig)
    check_classes(utility)
    values = np.zeros(train.n)
    se = np.zeros(train.n)
    for c in np.unique(utility.y):
        inside = np.nonzero(utility.y == c)[0]
        parts = map_tasks(_cs_task, (utility, vconfig.seed, int(c)), _chunks(0, vconfig.n_permutations, 25), n_jobs)
        mean, err = _summary(np.concatenate(parts))
        values[inside] = mean
        se[inside] = err
    return ValueVector(
        train.datum_ids, values, "cs_shapley", seed=vconfig.seed, n_samples=vconfig.n_permutations,
        config_digest=_digest(vconfig, tconfig, "cs_shapley"), utility_full=utility.full(),
        utility_empty=utility.empty, stderr=se,
    )
