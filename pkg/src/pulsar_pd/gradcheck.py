"""Central finite-difference checks of every primitive's adjoint.

Each case builds float64 inputs from a seed, reduces the primitive's output
to a scalar through a fixed random projection, and compares the tape
gradient with ``(f(x + eps) - f(x - eps)) / (2 eps)`` on sampled entries.
The error of one input array is ``max|analytic - numeric|`` divided by
the larger of its own gradient scale and 1e-3 of the largest gradient scale
in the case.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .network import ModelConfig, NetworkParams, block_forward, default_adjacency, init_params, network_forward
from .risk import RiskConfig, risk_pn, risk_pu

EPS = 1e-5
TOLERANCE = 1e-4
MAX_ENTRIES = 24


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _leaf(arr, name):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


# each case: seed -> (function of leaf tensors -> output tensor, dict of leaf arrays)

def _case_binary(op):
    def build(rng):
        shapes = {"a": (3, 4), "b": (4,)} if op != "mul" else {"a": (3, 4), "b": (3, 1)}
        arrays = {k: rng.normal(size=s) for k, s in shapes.items()}
        return lambda t: ad.PRIMITIVES[op](t["a"], t["b"]), arrays
    return build


def _case_unary(fn, gen=None):
    def build(rng):
        x = gen(rng) if gen else rng.normal(size=(3, 5))
        return lambda t: fn(t["x"]), {"x": x}
    return build


def _case_matmul(rng):
    return (lambda t: ad.matmul(t["a"], t["b"]),
            {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))})


def _case_matmul_batched(rng):
    return (lambda t: ad.matmul(t["a"], t["b"]),
            {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 2))})


def _case_conv1x1(rng):
    return (lambda t: ad.conv1x1(t["x"], t["w"], t["b"]),
            {"x": rng.normal(size=(2, 3, 5, 4)), "w": rng.normal(size=(4, 3)), "b": rng.normal(size=4)})


def _case_temporal_conv(rng):
    return (lambda t: ad.temporal_conv(t["x"], t["w"], t["b"]),
            {"x": rng.normal(size=(2, 3, 7, 4)), "w": rng.normal(size=(2, 3, 5)),
             "b": rng.normal(size=2)})


def _case_affine(rng):
    return (lambda t: ad.affine(t["x"], t["w"], t["b"]),
            {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(3, 6)), "b": rng.normal(size=3)})


def _case_batch_norm(train, axes):
    def build(rng):
        x = rng.normal(size=(3, 2, 4, 5)) * 2 + 0.5
        fshape = tuple(x.shape[a] for a in axes)

        def fn(t):
            state = BatchNormState(fshape)
            state.mean[...] = 0.3
            state.var[...] = 1.7
            return ad.batch_norm(t["x"], t["gamma"], t["beta"], state, feature_axes=axes, train=train)

        return fn, {"x": x, "gamma": rng.normal(size=fshape), "beta": rng.normal(size=fshape)}
    return build


def _case_dropout(rng):
    seed = int(rng.integers(2**31))
    return (lambda t: ad.dropout(t["x"], 0.4, rng=np.random.default_rng(seed), train=True),
            {"x": rng.normal(size=(3, 6))})


def _case_take(rng):
    idx = np.array([2, 0, 2, 3])
    return lambda t: ad.take(t["x"], idx), {"x": rng.normal(size=(4, 3))}


def _block_case(mode):
    def build(rng):
        cfg = ModelConfig(in_channels=3, frames=8, channels=(4,), temporal_kernel=3,
                          adaptive=(mode == "adaptive"), embed_channels=2, dropout=0.0)
        net = init_params(cfg, int(rng.integers(2**31)))
        arrays = {k: v.data + rng.normal(scale=0.3, size=v.shape) for k, v in net.params.items()
                  if k.startswith("block1.")}
        arrays["x"] = rng.normal(size=(2, 3, 8, 21))
        adjacency = default_adjacency()

        def fn(t):
            bn = {k: BatchNormState(s.mean.shape) for k, s in net.bn.items()}
            params = {k: t[k] for k in arrays if k != "x"}
            return block_forward(t["x"], params, "block1", bn, adjacency, mode=mode, train=True,
                                 dropout=0.0)

        return fn, arrays
    return build


def _network_case(adaptive):
    def build(rng):
        cfg = ModelConfig(frames=8, channels=(3, 4), temporal_kernel=3, adaptive=adaptive,
                          embed_channels=2, dropout=0.0)
        net = init_params(cfg, int(rng.integers(2**31)))
        arrays = {k: v.data + rng.normal(scale=0.3, size=v.shape) for k, v in net.params.items()}
        arrays["x"] = rng.normal(size=(3, 2, 8, 21))

        def fn(t):
            bn = {k: BatchNormState(s.mean.shape) for k, s in net.bn.items()}
            params = {k: t[k] for k in arrays if k != "x"}
            return network_forward(t["x"], NetworkParams(params, bn), cfg, train=True)

        return fn, arrays
    return build


def _risk_case(mode, loss):
    def build(rng):
        cfg = RiskConfig(base_loss=loss, theta_p=0.4, mode=mode)
        fn = risk_pn if mode == "pn" else risk_pu

        def run(t):
            return fn(t["gp"], t["gu"], cfg).objective

        gp = rng.normal(size=7)
        gu = rng.normal(size=9)
        if mode == "pu_nonneg":
            # keep away from the clamp's kink
            gu = gu + 1.5 * rng.choice([-1.0, 1.0])
        return run, {"gp": gp, "gu": gu}
    return build


CASES = {
    "add": _case_binary("add"),
    "sub": _case_binary("sub"),
    "mul": _case_binary("mul"),
    "neg": _case_unary(ad.neg),
    "scale": _case_unary(lambda x: ad.scale(x, -2.5)),
    "relu": _case_unary(ad.relu, lambda r: _away_from_zero(r, (3, 5))),
    "sigmoid": _case_unary(ad.sigmoid),
    "softplus": _case_unary(ad.softplus, lambda r: 4 * r.normal(size=(3, 5))),
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "conv1x1": _case_conv1x1,
    "temporal_conv": _case_temporal_conv,
    "affine": _case_affine,
    "batch_norm_train": _case_batch_norm(True, (1,)),
    "batch_norm_train_cv": _case_batch_norm(True, (1, 3)),
    "batch_norm_eval": _case_batch_norm(False, (1,)),
    "softmax": _case_unary(lambda x: ad.softmax(x, axis=-1), lambda r: 2 * r.normal(size=(3, 5))),
    "dropout": _case_dropout,
    "global_avg_pool": _case_unary(ad.global_avg_pool, lambda r: r.normal(size=(2, 3, 4, 5))),
    "reshape": _case_unary(lambda x: ad.reshape(x, (5, 3))),
    "transpose": _case_unary(lambda x: ad.transpose(x, (1, 0))),
    "take": _case_take,
    "sum": _case_unary(ad.sum_all),
    "mean": _case_unary(ad.mean),
    "block_baseline": _block_case("baseline"),
    "block_adaptive": _block_case("adaptive"),
    "network_baseline": _network_case(False),
    "network_adaptive": _network_case(True),
    "risk_pn_sigmoid": _risk_case("pn", "sigmoid"),
    "risk_pn_logistic": _risk_case("pn", "logistic"),
    "risk_pu_unbiased_sigmoid": _risk_case("pu_unbiased", "sigmoid"),
    "risk_pu_unbiased_logistic": _risk_case("pu_unbiased", "logistic"),
    "risk_pu_nonneg_sigmoid": _risk_case("pu_nonneg", "sigmoid"),
    "risk_pu_nonneg_logistic": _risk_case("pu_nonneg", "logistic"),
}

# which primitive a case exercises, for naming failures
CASE_PRIMITIVE = {name: name for name in CASES}
CASE_PRIMITIVE.update({"matmul_batched": "matmul", "batch_norm_train": "batch_norm",
                       "batch_norm_train_cv": "batch_norm", "batch_norm_eval": "batch_norm"})

# whole-network cases have ~20 parameter arrays; a few probes each suffice to
# catch wiring mistakes, while the block cases probe the layers in depth
CASE_MAX_ENTRIES = {"network_baseline": 6, "network_adaptive": 6}


def check_case(name, seed, eps=EPS, max_entries=None):
    """Max relative error over the leaves of one case for one seed."""
    if max_entries is None:
        max_entries = CASE_MAX_ENTRIES.get(name, MAX_ENTRIES)
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    fn, arrays = CASES[name](rng)
    out_probe = fn({k: Tensor(v) for k, v in arrays.items()})
    proj = rng.normal(size=out_probe.shape)

    def scalar(values):
        # leaves require grad so relu applications are recorded and their
        # activation patterns can be compared against the unperturbed point
        with ad.Tape() as tape:
            out = fn({k: _leaf(v, k) for k, v in values.items()})
        masks = [r.inputs[0].data > 0 for r in tape.records if r.op == "relu"]
        return float(np.sum(out.data * proj)), masks

    _, base_masks = scalar(arrays)

    def same_pattern(masks):
        return all(np.array_equal(a, b) for a, b in zip(masks, base_masks))

    leaves = {k: _leaf(v, k) for k, v in arrays.items()}
    with ad.Tape() as tape:
        out = fn(leaves)
        loss = ad.sum_all(ad.mul(out, Tensor(proj)))
    grads = tape.backward(loss, wrt=list(leaves.values()))

    picked = {}
    for k, leaf in leaves.items():
        flat = arrays[k].reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_entries:
            picks = rng.choice(flat.size, max_entries, replace=False)
        n_vals, kept = [], []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up, m_up = scalar(arrays)
            flat[i] = orig - eps
            down, m_down = scalar(arrays)
            flat[i] = orig
            if not (same_pattern(m_up) and same_pattern(m_down)):
                continue  # the step crosses a relu kink; the difference quotient is meaningless
            n_vals.append((up - down) / (2 * eps))
            kept.append(i)
        if not kept:
            continue
        picks = np.array(kept)
        picked[k] = (grads[leaf].reshape(-1)[picks], np.array(n_vals))

    # arrays whose true gradient vanishes (a bias feeding batch norm) are
    # measured against the case-wide gradient scale rather than their own
    case_scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in picked.values())
    worst = 0.0
    for a_vals, n_vals in picked.values():
        scale = max(np.abs(a_vals).max(), np.abs(n_vals).max(), 1e-3 * case_scale, 1e-8)
        worst = max(worst, float(np.abs(a_vals - n_vals).max() / scale))
    return worst


@dataclass
class GradcheckReport:
    seeds: list
    max_error: dict = field(default_factory=dict)  # case -> worst error over seeds
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def failures(self):
        return sorted(k for k, v in self.max_error.items() if not v < self.tolerance)

    @property
    def passed(self):
        return not self.failures

    def failing_primitives(self):
        return sorted({CASE_PRIMITIVE[c] for c in self.failures})

    def table(self):
        width = max(len(k) for k in self.max_error)
        lines = [f"{'case':<{width}}  max_rel_err  status"]
        for k in sorted(self.max_error):
            v = self.max_error[k]
            lines.append(f"{k:<{width}}  {v:11.3e}  {'ok' if v < self.tolerance else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self):
        return {"seeds": self.seeds, "tolerance": self.tolerance,
                "max_error": dict(sorted(self.max_error.items())), "failures": self.failures}


def run_gradcheck(seed=0, n_seeds=10, cases=None, tolerance=TOLERANCE) -> GradcheckReport:
    """Check every case under ``n_seeds`` consecutive seeds starting at ``seed``."""
    t0 = time.perf_counter()
    names = sorted(cases or CASES)
    unknown = set(names) - set(CASES)
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {sorted(unknown)}")
    seeds = list(range(seed, seed + n_seeds))
    report = GradcheckReport(seeds, {}, tolerance)
    for name in names:
        report.max_error[name] = max(check_case(name, s) for s in seeds)
    report.seconds = time.perf_counter() - t0
    return report
