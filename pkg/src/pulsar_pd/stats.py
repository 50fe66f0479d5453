"""Classification metrics, stream fusion, participant bootstrap, Friedman
and Holm tests."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1_macro: float
    f1_weighted: float
    auroc: float | None

    def to_dict(self):
        return asdict(self)


METRICS = ("accuracy", "precision", "recall", "f1_macro", "f1_weighted", "auroc")


def auroc(scores, labels):
    """Area under the ROC curve from the rank-sum statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    # rank sums are multiples of 1/2, so doubling keeps everything integral
    u2 = 2 * ranks[labels == 1].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2 * n_pos * n_neg))


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def compute_metrics(scores, labels) -> MetricsReport:
    """Metrics for logit scores; a sample is predicted positive when score >= 0."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if len(scores) != len(labels) or len(scores) == 0:
        raise ValueError("scores and labels must be non-empty and equally long")
    pred = (scores >= 0).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = len(labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1_pos, f1_neg = _f1(tp, fp, fn), _f1(tn, fn, fp)
    support_pos, support_neg = tp + fn, tn + fp
    try:
        auc = auroc(scores, labels)
    except UndefinedMetricError as exc:
        warnings.warn(str(exc), stacklevel=2)
        auc = None
    return MetricsReport(
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1_macro=(f1_pos + f1_neg) / 2,
        f1_weighted=(support_pos * f1_pos + support_neg * f1_neg) / n,
        auroc=auc,
    )


def fuse_streams(per_stream_logits):
    """Elementwise mean of per-stream logits (sign >= 0 means positive)."""
    arrs = [np.asarray(a, dtype=float).reshape(-1) for a in per_stream_logits]
    if not arrs:
        raise ValueError("no streams to fuse")
    if len({len(a) for a in arrs}) != 1:
        raise ValueError(f"stream score lengths differ: {[len(a) for a in arrs]}")
    return np.mean(arrs, axis=0)


# ---------------------------------------------------------------- bootstrap


@dataclass
class BootstrapReport:
    replicates: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self):
        return {"replicates": [r.to_dict() for r in self.replicates],
                "mean": self.mean, "std": self.std}

    def column(self, metric):
        return np.array([getattr(r, metric) for r in self.replicates], dtype=float)


def _summarize(reps):
    mean, std = {}, {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reps if getattr(r, m) is not None]
        mean[m] = float(np.mean(vals)) if vals else None
        std[m] = float(np.std(vals)) if vals else None
    return mean, std


def bootstrap_draws(groups, n_participants=120, reps=20, seed=0):
    """Participant ids drawn with replacement, one list per replicate."""
    ids = sorted(set(np.asarray(groups, dtype=object).tolist()))
    if not ids:
        raise ValueError("empty test set")
    children = np.random.SeedSequence(seed).spawn(reps)
    return [[ids[i] for i in np.random.default_rng(c).integers(0, len(ids), n_participants)]
            for c in children]


def bootstrap_eval(scores_by_model, labels, groups, n_participants=120, reps=20, seed=0):
    """Paired participant bootstrap over one or more models' clip scores.

    Each replicate samples participants with replacement and pools all of
    their clips; every model is scored on the same draw. Returns a dict
    mapping model name to :class:`BootstrapReport`.
    """
    if not isinstance(scores_by_model, dict):
        scores_by_model = {"model": scores_by_model}
    labels = np.asarray(labels).astype(int)
    groups = np.asarray(groups, dtype=object)
    if len(labels) == 0:
        raise ValueError("empty test set")
    rows_of = {}
    for i, g in enumerate(groups.tolist()):
        rows_of.setdefault(g, []).append(i)
    draws = bootstrap_draws(groups, n_participants, reps, seed)
    out = {name: [] for name in scores_by_model}
    for draw in draws:
        idx = np.concatenate([rows_of[p] for p in draw])
        for name, s in scores_by_model.items():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out[name].append(compute_metrics(np.asarray(s)[idx], labels[idx]))
    reports = {}
    for name, reps_ in out.items():
        mean, std = _summarize(reps_)
        reports[name] = BootstrapReport(reps_, mean, std)
    return reports


# ---------------------------------------------------------------- chi-square


def _gammainc_lower_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammainc_upper_cf(a, x):
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammaincc(a, x):
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1:
        return max(0.0, 1.0 - _gammainc_lower_series(a, x))
    return _gammainc_upper_cf(a, x)


def chi2_sf(x, df):
    return gammaincc(df / 2.0, x / 2.0)


def chi2_critical(df, alpha=0.05):
    """Upper ``alpha`` quantile of the chi-square distribution (bisection)."""
    lo, hi = 0.0, max(10.0, 10.0 * df)
    while chi2_sf(hi, df) > alpha:
        hi *= 2
    for _ in range(200):
        mid = (lo + hi) / 2
        if chi2_sf(mid, df) > alpha:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def _normal_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2))


# ---------------------------------------------------------------- Friedman / Holm


def rank_rows(matrix, higher_is_better=True):
    """Average ranks within each row; rank 1 is the best entry."""
    m = np.asarray(matrix, dtype=float)
    ranks = np.empty_like(m)
    for r, row in enumerate(m):
        key = -row if higher_is_better else row
        order = np.argsort(key, kind="mergesort")
        srt = key[order]
        i = 0
        while i < len(srt):
            j = i
            while j + 1 < len(srt) and srt[j + 1] == srt[i]:
                j += 1
            ranks[r, order[i:j + 1]] = (i + j) / 2 + 1
            i = j + 1
    return ranks


def holm_adjust(p_values):
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adj_sorted = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj_sorted
    return out.tolist()


@dataclass
class FriedmanReport:
    statistic: float
    df: int
    p_value: float
    critical_value: float
    reject: bool
    average_ranks: dict
    pairwise: list  # [{"a", "b", "z", "p", "p_holm"}]
    alpha: float = 0.05

    def to_dict(self):
        return asdict(self)


def friedman_test(accuracy_matrix, model_names=None, alpha=0.05) -> FriedmanReport:
    """Friedman rank test over a replicates x models matrix, plus Holm-adjusted
    pairwise comparisons of average ranks."""
    m = np.asarray(accuracy_matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ValueError(f"need at least 2 replicates x 2 models, got shape {m.shape}")
    n, k = m.shape
    names = list(model_names) if model_names is not None else [f"m{j}" for j in range(k)]
    if len(names) != k:
        raise ValueError("model_names length does not match the matrix")
    ranks = rank_rows(m)
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    stat = max(stat, 0.0) if abs(stat) < 1e-9 else stat
    df = k - 1
    p = chi2_sf(stat, df)
    crit = chi2_critical(df, alpha)
    avg = rank_sums / n

    se = math.sqrt(k * (k + 1) / (6.0 * n))
    pairs, raw = [], []
    for a in range(k):
        for b in range(a + 1, k):
            z = (avg[a] - avg[b]) / se
            pv = min(1.0, 2 * _normal_sf(abs(z)))
            pairs.append({"a": names[a], "b": names[b], "z": z, "p": pv})
            raw.append(pv)
    for pr, adj in zip(pairs, holm_adjust(raw)):
        pr["p_holm"] = adj
    return FriedmanReport(stat, df, p, crit, bool(stat > crit),
                          {nm: float(r) for nm, r in zip(names, avg)}, pairs, alpha)
