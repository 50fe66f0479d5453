"""Ablation variants and the end-to-end experiment on keypoint sequences."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClipArrays, prepare_clips, split_by_participant, stack_clips
from .graph import build_hand_graph
from .network import ModelConfig
from .risk import RiskConfig
from .stats import bootstrap_eval, compute_metrics, friedman_test, fuse_streams
from .streams import StreamKind, derive_stream
from .training import TrainConfig, train_stream

log = logging.getLogger(__name__)

ALL_STREAMS = tuple(k.value for k in StreamKind)

# The synthetic set gives about 7 optimizer steps per epoch, so the end-to-end
# run uses the upper end of the usual learning-rate range instead of 1e-4.
SYNTHETIC_LR = 1e-3


@dataclass(frozen=True)
class Variant:
    name: str
    adaptive: bool
    pu: bool
    streams: tuple


VARIANTS = {
    "JS": Variant("JS", False, False, ("joint",)),
    "JS_PU": Variant("JS_PU", False, True, ("joint",)),
    "JS_AC": Variant("JS_AC", True, False, ("joint",)),
    "JS_AC_PU": Variant("JS_AC_PU", True, True, ("joint",)),
    "PULSAR": Variant("PULSAR", True, True, ALL_STREAMS),
}


def get_variant(name) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}") from None


def stream_arrays(clips: ClipArrays, stream) -> np.ndarray:
    return derive_stream(clips.X, stream, build_hand_graph())


def pu_training_labels(observed, risk: RiskConfig):
    """Validate observed labels against the risk mode."""
    observed = np.asarray(observed, dtype=int)
    if not np.any(observed == 1):
        raise ValueError("dataset has no positive labels")
    if not np.any(observed == 0):
        raise ValueError(f"{risk.mode} training needs unlabeled/negative samples")
    return observed


@dataclass
class VariantResult:
    variant: str
    checkpoints: dict  # stream -> Checkpoint
    test_logits: dict = field(default_factory=dict)  # stream -> logits, plus "fused"

    @property
    def scores(self):
        return self.test_logits["fused"]


class StreamTrainer:
    """Trains stream models on fixed splits, reusing identical configurations.

    Each variant takes its adaptive flag from the variant table and its risk
    from ``base.risk``: PN variants use the PN risk with the same prior and
    base loss, PU variants use the base PU mode (non-negative when the base
    risk is PN). Two variants that need the same model under the same seed
    share one checkpoint instead of retraining.
    """

    def __init__(self, train: ClipArrays, val: ClipArrays, base: TrainConfig,
                 model: ModelConfig | None = None, log_file=None):
        self.train = train
        self.val = val
        self.base = base
        self.model = model or ModelConfig(dtype="float32")
        self.log_file = log_file
        self._cache: dict = {}
        self._streams: dict = {}
        self.seconds = 0.0

    def arrays(self, which: ClipArrays, stream):
        key = (id(which), stream)
        if key not in self._streams:
            self._streams[key] = stream_arrays(which, stream)
        return self._streams[key]

    def risk_for(self, variant: Variant) -> RiskConfig:
        r = self.base.risk
        pu_mode = r.mode if r.is_pu else "pu_nonneg"
        return RiskConfig(base_loss=r.base_loss, theta_p=r.theta_p,
                          mode=pu_mode if variant.pu else "pn")

    def fit(self, variant: Variant) -> dict:
        rc = self.risk_for(variant)
        mc = replace(self.model, adaptive=variant.adaptive)
        y = pu_training_labels(self.train.observed, rc)
        out = {}
        for stream in variant.streams:
            key = (mc, rc, stream)
            if key not in self._cache:
                tc = replace(self.base, risk=rc, stream=stream)
                t0 = time.perf_counter()
                self._cache[key] = train_stream(mc, self.arrays(self.train, stream), y,
                                                self.arrays(self.val, stream), self.val.observed,
                                                tc, log_file=self.log_file)
                self.seconds += time.perf_counter() - t0
                log.info("trained %s/%s in %.1fs", variant.name, stream, time.perf_counter() - t0)
            out[stream] = self._cache[key]
        return out


def variant_logits(checkpoints: dict, clips: ClipArrays) -> dict:
    graph = build_hand_graph()
    logits = {s: ck.logits(derive_stream(clips.X, s, graph)) for s, ck in checkpoints.items()}
    logits["fused"] = fuse_streams([logits[s] for s in checkpoints])
    return logits


@dataclass
class ExperimentSplits:
    train: ClipArrays
    val: ClipArrays
    test: ClipArrays
    reports: dict


def make_splits(sequences, seed=0, test_fraction=0.3, val_fraction=0.2) -> ExperimentSplits:
    """Participant-level train/validation/test split; flips on train only."""
    rest, test_seqs = split_by_participant(sequences, test_fraction, seed)
    train_seqs, val_seqs = split_by_participant(rest, val_fraction, seed + 1)
    tr, r1 = prepare_clips(train_seqs, augment=True)
    va, r2 = prepare_clips(val_seqs, augment=False)
    te, r3 = prepare_clips(test_seqs, augment=False)
    return ExperimentSplits(stack_clips(tr), stack_clips(va), stack_clips(te),
                            {"train": r1.to_dict(), "val": r2.to_dict(), "test": r3.to_dict()})


def run_ablation(sequences, variants=tuple(VARIANTS), seed=0, train_config: TrainConfig | None = None,
                 model_config: ModelConfig | None = None, test_fraction=0.3, val_fraction=0.2,
                 bootstrap=(120, 20), log_file=None):
    """Train every requested variant and score it on held-out participants.

    Returns a dict with per-variant true-label test metrics (per stream and
    fused), the bootstrap reports, the Friedman analysis and timings.
    """
    t0 = time.perf_counter()
    splits = make_splits(sequences, seed, test_fraction, val_fraction)
    base = train_config or TrainConfig(seed=seed, lr=SYNTHETIC_LR)
    trainer = StreamTrainer(splits.train, splits.val, base, model_config, log_file=log_file)

    results = {}
    for name in variants:
        v = get_variant(name)
        cks = trainer.fit(v)
        res = VariantResult(name, cks, variant_logits(cks, splits.test))
        results[name] = res

    truth = splits.test.truth
    metrics = {name: {k: compute_metrics(s, truth).to_dict() for k, s in r.test_logits.items()}
               for name, r in results.items()}
    n_part, reps = bootstrap
    boot = bootstrap_eval({n: r.scores for n, r in results.items()}, truth, splits.test.groups,
                          n_part, reps, seed)
    friedman = None
    if len(results) >= 2:
        matrix = np.column_stack([boot[n].column("accuracy") for n in results])
        friedman = friedman_test(matrix, list(results)).to_dict()
    return {
        "seed": seed,
        "splits": {k: len(getattr(splits, k)) for k in ("train", "val", "test")},
        "prepare": splits.reports,
        "test_metrics": metrics,
        "val_accuracy": {n: {s: ck.best_val_accuracy for s, ck in r.checkpoints.items()}
                         for n, r in results.items()},
        "bootstrap": {n: {"mean": b.mean, "std": b.std} for n, b in boot.items()},
        "friedman": friedman,
        "train_seconds": trainer.seconds,
        "total_seconds": time.perf_counter() - t0,
        "results": results,
    }
