"""Training loop for one stream model, plateau scheduling and checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .network import ModelConfig, NetworkParams, init_params, network_forward
from .optim import AdamState, adam_step
from .risk import RiskConfig, risk
from .streams import StreamKind

log = logging.getLogger(__name__)

MAGIC = b"PULSARCK1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    factor: float = 0.5
    patience: int = 5
    max_epochs: int = 30
    risk: RiskConfig = field(default_factory=RiskConfig)
    stream: str = "joint"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.lr <= 0 or self.max_epochs < 1:
            raise ValueError("lr must be positive and max_epochs at least 1")
        StreamKind(self.stream)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("risk"), dict):
            d["risk"] = RiskConfig(**d["risk"])
        return cls(**d)


class PlateauScheduler:
    """Halve (by ``factor``) the learning rate after ``patience`` epochs
    without a strict improvement of the monitored accuracy."""

    def __init__(self, lr, factor=0.5, patience=5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, val_accuracy):
        if not 0 <= val_accuracy <= 1:
            raise ValueError(f"accuracy must be in [0, 1], got {val_accuracy}")
        if val_accuracy > self.best:
            self.best = val_accuracy
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_step(state: PlateauScheduler, val_accuracy):
    return state.step(val_accuracy)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    net: NetworkParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")

    def logits(self, X, batch_size=256):
        return predict_logits(self.net, self.model_config, X, batch_size)


def predict_logits(net: NetworkParams, config: ModelConfig, X, batch_size=256):
    """Eval-mode logits for an N x C x T x V array, as a flat float64 vector."""
    X = np.asarray(X)
    out = np.empty(len(X))
    for i in range(0, len(X), batch_size):
        out[i:i + batch_size] = network_forward(X[i:i + batch_size], net, config,
                                                train=False).data[:, 0]
    return out


def accuracy_by_sign(logits, labels):
    return float(np.mean((np.asarray(logits) >= 0).astype(int) == np.asarray(labels)))


def batch_objective(logits: Tensor, labels, cfg: RiskConfig):
    """Risk over one batch; labels are 1 for positive, 0 for negative/unlabeled.

    PN risks contrast the two label groups. PU risks treat the whole batch as
    the unlabeled sample: a draw from the marginal, whose positive share is
    ``theta_p``. The labeled positives enter both terms.
    """
    labels = np.asarray(labels)
    pos = ad.take(logits, np.flatnonzero(labels == 1))
    if cfg.is_pu:
        other = ad.take(logits, np.arange(len(labels)))
    else:
        other = ad.take(logits, np.flatnonzero(labels != 1))
    return risk(pos, other, cfg, allow_empty=True)


def _snapshot(net: NetworkParams):
    return {k: t.data.copy() for k, t in net.params.items()}, copy.deepcopy(net.bn)


def train_stream(model_config: ModelConfig, X_train, y_train, X_val, y_val,
                 cfg: TrainConfig, log_file=None) -> Checkpoint:
    """Train one stream model and return the best-validation-accuracy state.

    ``y_train``/``y_val`` hold observed labels: 1 for positive, 0 for
    negative (PN) or unlabeled (PU).
    """
    X_train = np.asarray(X_train, dtype=model_config.dtype)
    y_train = np.asarray(y_train, dtype=int)
    if len(X_train) == 0:
        raise ValueError("empty training set")
    if not np.any(y_train == 1):
        raise ValueError("training set has no positive labels")
    if not np.any(y_train == 0):
        kind = "unlabeled" if cfg.risk.is_pu else "negative"
        raise ValueError(f"{cfg.risk.mode} training needs {kind} samples")

    net = init_params(model_config, cfg.seed)
    params = net.params
    opt = AdamState(params, lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.factor, cfg.patience)
    names = list(params)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.max_epochs)

    history = []
    best = (-1.0, -1, None)
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng(seeds[2 * epoch]).permutation(len(X_train))
        drop_rng = np.random.default_rng(seeds[2 * epoch + 1])
        sums = {"total": 0.0, "positive_term": 0.0, "unlabeled_or_negative_term": 0.0}
        clamped = 0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ad.Tape(rng=drop_rng) as tape:
                logits = network_forward(X_train[idx], net, model_config, train=True)
                br = batch_objective(logits, y_train[idx], cfg.risk)
            g = tape.backward(br.objective, wrt=[params[k] for k in names])
            adam_step(params, {k: g[params[k]] for k in names}, opt)
            for key in sums:
                sums[key] += getattr(br, key)
            clamped += br.clamped
            steps += 1

        val_logits = predict_logits(net, model_config, X_val) if len(X_val) else np.zeros(0)
        val_acc = accuracy_by_sign(val_logits, y_val) if len(X_val) else 0.0
        lr_used = opt.lr
        opt.lr = sched.step(val_acc)
        entry = {"epoch": epoch + 1, "steps": steps, "lr": lr_used, "val_accuracy": val_acc,
                 "train_risk": {**{k: v / steps for k, v in sums.items()},
                                "clamped_batches": clamped}}
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps({"stream": cfg.stream, **entry}, sort_keys=True) + "\n")
        log.info("stream=%s epoch=%d risk=%.4f val_acc=%.4f lr=%.2e", cfg.stream, epoch + 1,
                 entry["train_risk"]["total"], val_acc, lr_used)
        if val_acc > best[0]:
            best = (val_acc, epoch + 1, _snapshot(net))

    arrays, bn = best[2]
    best_net = NetworkParams({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}, bn)
    return Checkpoint(model_config, cfg, best_net, history, best[1], best[0])


# ---------------------------------------------------------------- checkpoint I/O


def _arrays_of(ckpt: Checkpoint):
    out = [(f"param/{k}", t.data) for k, t in ckpt.net.params.items()]
    for k, st in ckpt.net.bn.items():
        out.append((f"bn/{k}/mean", st.mean))
        out.append((f"bn/{k}/var", st.var))
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name, arr in _arrays_of(ckpt):
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "arrays": entries,
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "best_val_accuracy": ckpt.best_val_accuracy,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(payload)


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"not a checkpoint: expected header tag {MAGIC.decode()!r}")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[pos:pos + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc.msg}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    config = ModelConfig.from_dict(header["model_config"])
    if expect_config is not None and expect_config != config:
        _check_shapes(header, expect_config)
        config = expect_config

    arrays = {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise CheckpointError(f"truncated checkpoint payload at {e['name']!r}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    if len(arrays) != len(header["arrays"]):
        raise CheckpointError("duplicate array names in checkpoint")

    ref = init_params(config, 0)
    params, bn = {}, {}
    for name, t in ref.params.items():
        arr = arrays.pop(f"param/{name}", None)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, config expects {t.shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    for name, st in ref.bn.items():
        mean, var = arrays.pop(f"bn/{name}/mean", None), arrays.pop(f"bn/{name}/var", None)
        if mean is None or var is None:
            raise CheckpointError(f"checkpoint is missing BN statistics for {name!r}")
        if mean.shape != st.mean.shape or var.shape != st.var.shape:
            raise CheckpointError(f"BN statistics for {name!r} do not match the config")
        s = BatchNormState(st.mean.shape, dtype=mean.dtype)
        s.mean[...] = mean
        s.var[...] = var
        bn[name] = s
    if arrays:
        raise CheckpointError(f"unexpected arrays in checkpoint: {sorted(arrays)}")
    tc = header.get("train_config")
    return Checkpoint(config, TrainConfig.from_dict(tc) if tc else None, NetworkParams(params, bn),
                      header["history"], header["best_epoch"], header["best_val_accuracy"])


def _check_shapes(header, config: ModelConfig):
    ref = init_params(config, 0)
    stored = {e["name"]: tuple(e["shape"]) for e in header["arrays"]}
    for name, t in ref.params.items():
        got = stored.get(f"param/{name}")
        if got is None:
            raise CheckpointError(f"checkpoint lacks parameter {name!r} required by the config")
        if got != t.shape:
            raise CheckpointError(f"parameter {name!r} has shape {got}, config expects {t.shape}")
    extra = {n for n in stored if n.startswith("param/")} - {f"param/{n}" for n in ref.params}
    if extra:
        raise CheckpointError(f"checkpoint has parameters unknown to the config: {sorted(extra)}")
