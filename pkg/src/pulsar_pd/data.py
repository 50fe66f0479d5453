"""Keypoint sequences: parsing, cleaning, clipping, flips, splits, synthesis."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

NUM_LANDMARKS = 21
CLIP_FRAMES = 80
MIN_MEAN_CONFIDENCE = 0.5
LABELS = ("positive", "unlabeled")
AUGMENTATIONS = ("id", "h", "v", "hv")


class SchemaError(ValueError):
    pass


@dataclass
class KeypointSequence:
    """One recording of one hand.

    ``frames`` is F x 21 x 3 (x, y, confidence); rows where ``valid`` is
    false are placeholders for frames without a detected hand.
    """

    participant_id: str
    hand: str
    label: str
    fps: float
    frames: np.ndarray
    valid: np.ndarray
    true_label: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float).reshape(-1, NUM_LANDMARKS, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.valid) != len(self.frames):
            raise SchemaError("valid mask length does not match frame count")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, KeypointSequence):
            return NotImplemented
        return (self.participant_id == other.participant_id and self.hand == other.hand
                and self.label == other.label and self.fps == other.fps
                and self.true_label == other.true_label
                and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.frames[self.valid], other.frames[other.valid]))


@dataclass
class Clip:
    data: np.ndarray  # 2 x 80 x 21
    participant_id: str
    hand: str
    clip_index: int
    label: str
    augmentation: str = "id"
    true_label: str | None = None


# ---------------------------------------------------------------- I/O


def _sequence_from_record(rec, where):
    for key in ("participant_id", "hand", "label", "fps", "frames"):
        if key not in rec:
            raise SchemaError(f"{where}: missing field {key!r}")
    if rec["hand"] not in ("right", "left"):
        raise SchemaError(f"{where}: hand must be 'right' or 'left', got {rec['hand']!r}")
    if rec["label"] not in LABELS:
        raise SchemaError(f"{where}: label must be one of {LABELS}, got {rec['label']!r}")
    true_label = rec.get("true_label")
    if true_label is not None and true_label not in ("positive", "negative"):
        raise SchemaError(f"{where}: true_label must be 'positive' or 'negative'")
    fps = rec["fps"]
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise SchemaError(f"{where}: fps must be a positive number, got {fps!r}")

    raw = rec["frames"]
    frames = np.zeros((len(raw), NUM_LANDMARKS, 3))
    valid = np.zeros(len(raw), dtype=bool)
    for i, fr in enumerate(raw):
        if fr is None:
            continue
        if len(fr) != NUM_LANDMARKS:
            raise SchemaError(f"{where}: frame {i} has {len(fr)} landmarks, expected {NUM_LANDMARKS}")
        arr = np.asarray(fr, dtype=float)
        if arr.shape != (NUM_LANDMARKS, 3):
            raise SchemaError(f"{where}: frame {i} landmarks must be [x, y, confidence] triples")
        if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise SchemaError(f"{where}: frame {i} has values outside [0, 1]")
        frames[i] = arr
        valid[i] = True
    return KeypointSequence(str(rec["participant_id"]), rec["hand"], rec["label"], float(fps),
                            frames, valid, true_label)


def parse_keypoint_file(path) -> list[KeypointSequence]:
    """Read a JSON-lines keypoint file (one sequence per line)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"line {lineno}: expected a JSON object")
            out.append(_sequence_from_record(rec, f"line {lineno}"))
    return out


def sequence_to_record(seq: KeypointSequence) -> dict:
    frames = [fr.tolist() if ok else None for fr, ok in zip(seq.frames, seq.valid)]
    rec = {"participant_id": seq.participant_id, "hand": seq.hand, "label": seq.label}
    if seq.true_label is not None:
        rec["true_label"] = seq.true_label
    rec["fps"] = seq.fps
    rec["frames"] = frames
    return rec


def write_keypoint_file(sequences, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_record(seq), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------- cleaning


def frame_keep_mask(seq: KeypointSequence, min_confidence=MIN_MEAN_CONFIDENCE):
    conf = seq.frames[:, :, 2].mean(axis=1) if len(seq) else np.zeros(0)
    return seq.valid & (conf >= min_confidence)


def clean_sequence(seq: KeypointSequence, min_confidence=MIN_MEAN_CONFIDENCE) -> KeypointSequence:
    """Drop frames with no hand or a mean landmark confidence below threshold."""
    keep = frame_keep_mask(seq, min_confidence)
    return replace(seq, frames=seq.frames[keep], valid=np.ones(int(keep.sum()), dtype=bool))


def segment_clips(seq: KeypointSequence, frames=CLIP_FRAMES) -> list[Clip]:
    """Consecutive non-overlapping windows; the short tail is discarded."""
    xy = seq.frames[seq.valid][:, :, :2]
    clips = []
    for i in range(len(xy) // frames):
        window = xy[i * frames:(i + 1) * frames]  # T x V x 2
        clips.append(Clip(np.ascontiguousarray(window.transpose(2, 0, 1)), seq.participant_id,
                          seq.hand, i, seq.label, "id", seq.true_label))
    return clips


def augment_clip(clip: Clip) -> list[Clip]:
    """Identity, horizontal, vertical and combined flips in keypoint space."""
    if clip.augmentation != "id":
        raise ValueError("augment_clip expects an un-augmented clip")
    out = []
    for tag in AUGMENTATIONS:
        d = clip.data.copy()
        if "h" in tag:
            d[0] = 1.0 - d[0]
        if "v" in tag:
            d[1] = 1.0 - d[1]
        out.append(replace(clip, data=d, augmentation=tag))
    return out


def flip_clip(clip: Clip, tag: str) -> Clip:
    d = clip.data.copy()
    if "h" in tag:
        d[0] = 1.0 - d[0]
    if "v" in tag:
        d[1] = 1.0 - d[1]
    return replace(clip, data=d)


@dataclass
class PrepareReport:
    sequences: int = 0
    frames_in: int = 0
    frames_dropped: int = 0
    clips_emitted: int = 0
    frames_discarded_tail: int = 0
    sequences_skipped: list = field(default_factory=list)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def prepare_clips(sequences, augment=False, frames=CLIP_FRAMES):
    """Clean, segment and optionally flip-augment a list of sequences."""
    report = PrepareReport()
    clips = []
    for seq in sequences:
        report.sequences += 1
        report.frames_in += len(seq)
        cleaned = clean_sequence(seq)
        report.frames_dropped += len(seq) - len(cleaned)
        got = segment_clips(cleaned, frames)
        report.frames_discarded_tail += len(cleaned) - frames * len(got)
        if not got:
            reason = "no valid frames" if len(cleaned) == 0 else f"only {len(cleaned)} valid frames"
            report.sequences_skipped.append({"participant_id": seq.participant_id,
                                             "hand": seq.hand, "reason": reason})
        for c in got:
            clips.extend(augment_clip(c) if augment else [c])
    report.clips_emitted = len(clips)
    return clips, report


@dataclass
class ClipArrays:
    """Stacked clips ready for the network."""

    X: np.ndarray           # N x 2 x 80 x 21
    observed: np.ndarray    # 1 = positive label, 0 = unlabeled
    truth: np.ndarray       # 1 = truly positive, 0 = truly negative
    groups: np.ndarray      # participant id per clip

    def __len__(self):
        return len(self.X)


def stack_clips(clips) -> ClipArrays:
    if not clips:
        return ClipArrays(np.zeros((0, 2, CLIP_FRAMES, NUM_LANDMARKS)), np.zeros(0, int),
                          np.zeros(0, int), np.zeros(0, dtype=object))
    X = np.stack([c.data for c in clips])
    obs = np.array([c.label == "positive" for c in clips], dtype=int)
    truth = np.array([(c.true_label or ("positive" if c.label == "positive" else "negative"))
                      == "positive" for c in clips], dtype=int)
    groups = np.array([c.participant_id for c in clips], dtype=object)
    return ClipArrays(X, obs, truth, groups)


# ---------------------------------------------------------------- splitting


def split_by_participant(sequences, val_fraction=0.2, seed=0):
    """Stratified participant-level split into (train, validation)."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    label_of: dict[str, str] = {}
    for s in sequences:
        if s.label == "positive" or s.participant_id not in label_of:
            label_of[s.participant_id] = s.label
    ids = sorted(label_of)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 participants to split, got {len(ids)}")
    n_val = min(max(1, round(val_fraction * len(ids))), len(ids) - 1)

    strata = {lab: [p for p in ids if label_of[p] == lab] for lab in LABELS}
    exact = {lab: n_val * len(m) / len(ids) for lab, m in strata.items()}
    take = {lab: math.floor(x) for lab, x in exact.items()}
    by_remainder = sorted(LABELS, key=lambda lab: (-(exact[lab] - take[lab]), lab))
    for lab in by_remainder[: n_val - sum(take.values())]:
        take[lab] += 1

    rng = np.random.default_rng(seed)
    val_ids = set()
    for lab in LABELS:
        members = strata[lab]
        if members and take[lab]:
            picked = rng.permutation(len(members))[: take[lab]]
            val_ids.update(members[i] for i in picked)
    train = [s for s in sequences if s.participant_id not in val_ids]
    val = [s for s in sequences if s.participant_id in val_ids]
    return train, val


# ---------------------------------------------------------------- synthesis

# right hand, wrist at origin, fingers pointing up (+y), unit ~ palm length
_TEMPLATE = np.array([
    [0.00, 0.00],
    [-0.25, 0.15], [-0.45, 0.30], [-0.60, 0.45], [-0.70, 0.60],
    [-0.20, 0.70], [-0.22, 0.95], [-0.24, 1.10], [-0.25, 1.25],
    [0.00, 0.72], [0.00, 1.00], [0.00, 1.18], [0.00, 1.33],
    [0.18, 0.68], [0.20, 0.92], [0.21, 1.08], [0.22, 1.20],
    [0.33, 0.60], [0.38, 0.78], [0.41, 0.90], [0.43, 1.00],
])
# share of the index-tip closing motion carried by each index joint
_INDEX_SHARE = {6: 0.25, 7: 0.6, 8: 1.0}


@dataclass(frozen=True)
class SynthConfig:
    n_healthy: int = 100
    n_pd: int = 100
    hands_per_participant: int = 2
    freq_healthy: float = 4.0
    freq_healthy_sd: float = 0.5
    freq_pd: float = 2.0
    freq_pd_sd: float = 0.4
    decrement_healthy: float = 0.0
    decrement_pd: float = 0.03
    timing_cv_healthy: float = 0.05
    timing_cv_pd: float = 0.15
    jerk_sd_pd: float = 0.05
    jitter_sd: float = 0.003
    drift_sd: float = 0.002
    # per-recording framing; the default is one fixed pose so that absolute
    # position carries no participant identity
    hand_scale: tuple = (0.18, 0.18)
    centre_spread: float = 0.0
    rotation_sd: float = 0.0
    contamination: float = 0.2
    fps: float = 30.0
    duration: float = 3.2
    lead_frames: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hand_scale", tuple(float(v) for v in self.hand_scale))
        if len(self.hand_scale) != 2 or not 0 < self.hand_scale[0] <= self.hand_scale[1] <= 0.3:
            raise ValueError(f"hand_scale must be (low, high) within (0, 0.3], got {self.hand_scale}")
        if not 0 <= self.centre_spread <= 0.2 or self.rotation_sd < 0:
            raise ValueError("centre_spread must be in [0, 0.2] and rotation_sd non-negative")
        if self.n_healthy <= 0 or self.n_pd <= 0:
            raise ValueError("sequence counts must be positive")
        if self.hands_per_participant not in (1, 2):
            raise ValueError("hands_per_participant must be 1 or 2")
        if min(self.freq_healthy, self.freq_pd) <= 0:
            raise ValueError("tap frequencies must be positive")
        if min(self.freq_healthy_sd, self.freq_pd_sd, self.jitter_sd, self.drift_sd,
               self.timing_cv_healthy, self.timing_cv_pd, self.jerk_sd_pd) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.contamination < 1:
            raise ValueError(f"contamination must be in [0, 1), got {self.contamination}")
        if not 0 <= self.decrement_healthy < 1 or not 0 <= self.decrement_pd < 1:
            raise ValueError("amplitude decrements must be in [0, 1)")
        if self.fps <= 0 or self.duration <= 0 or self.lead_frames < 0:
            raise ValueError("fps and duration must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def _aperture(rng, n_frames, fps, freq, freq_sd, timing_cv, decrement, jerk_sd):
    """Openness in [0, 1] per frame: 1 = fingers apart, 0 = touching."""
    f0 = max(0.5, rng.normal(freq, freq_sd)) if freq_sd > 0 else freq
    dur = n_frames / fps
    # tap boundaries with per-tap timing variability
    bounds = [rng.uniform(-0.5, 0) / f0]
    while bounds[-1] < dur:
        period = (1.0 / f0) * max(0.3, 1 + timing_cv * rng.standard_normal())
        bounds.append(bounds[-1] + period)
    bounds = np.asarray(bounds)
    t = np.arange(n_frames) / fps
    idx = np.searchsorted(bounds, t, side="right") - 1
    frac = (t - bounds[idx]) / (bounds[idx + 1] - bounds[idx])
    taps = idx - idx[0]
    amp = rng.uniform(0.75, 1.0) * (1 - decrement) ** taps
    open_ = amp * 0.5 * (1 + np.cos(2 * np.pi * frac))
    if jerk_sd > 0:
        open_ = open_ + jerk_sd * rng.standard_normal(n_frames)
    return np.clip(open_, 0.0, 1.0), f0


def _pose_sequence(rng, openness, hand, cfg: SynthConfig):
    n = len(openness)
    tpl = _TEMPLATE.copy()
    if hand == "left":
        tpl[:, 0] = -tpl[:, 0]
    closed_tip = tpl[4] + 0.05 * (tpl[8] - tpl[4]) / np.linalg.norm(tpl[8] - tpl[4])
    thumb_closed = tpl[4] + 0.15 * (tpl[8] - tpl[4])
    closing = closed_tip - tpl[8]

    shut = (1 - openness)[:, None]
    pts = np.repeat(tpl[None], n, axis=0)
    for j, share in _INDEX_SHARE.items():
        pts[:, j] += shut * share * closing
    pts[:, 4] += shut * (thumb_closed - tpl[4])

    scale = rng.uniform(*cfg.hand_scale)
    angle = np.deg2rad(rng.normal(0, cfg.rotation_sd))
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    half = cfg.centre_spread
    # the middle of the hand (not the wrist) sits near the image centre
    centre = np.array([0.5 + rng.uniform(-half, half),
                       0.5 + 0.65 * scale + rng.uniform(-half, half) * 0.75])
    pts = pts @ rot.T * scale
    img = np.empty_like(pts)
    img[..., 0] = centre[0] + pts[..., 0]
    img[..., 1] = centre[1] - pts[..., 1]

    # slow drift shared by all landmarks plus per-landmark jitter
    steps = cfg.drift_sd * rng.standard_normal((n, 2))
    drift = np.zeros((n, 2))
    for i in range(1, n):
        drift[i] = 0.9 * drift[i - 1] + steps[i]
    img += drift[:, None, :]
    img += cfg.jitter_sd * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> list[KeypointSequence]:
    """Simulate finger-tapping keypoint sequences for two classes.

    PD-like recordings tap slower, lose amplitude tap by tap and are jerkier.
    A ``contamination`` share of PD-like participants is emitted with label
    ``unlabeled``; ``true_label`` always records the generating class.
    """
    rng = np.random.default_rng(cfg.seed)
    n_active = int(round(cfg.duration * cfg.fps))
    hands = ("right", "left")[: cfg.hands_per_participant]
    out = []
    for cls, count in (("negative", cfg.n_healthy), ("positive", cfg.n_pd)):
        pd = cls == "positive"
        n_part = math.ceil(count / cfg.hands_per_participant)
        emitted = 0
        for p in range(n_part):
            pid = f"{'pd' if pd else 'hc'}{p:04d}"
            hidden = pd and rng.random() < cfg.contamination
            label = "positive" if pd and not hidden else "unlabeled"
            for hand in hands:
                if emitted == count:
                    break
                emitted += 1
                openness, _ = _aperture(
                    rng, n_active, cfg.fps,
                    cfg.freq_pd if pd else cfg.freq_healthy,
                    cfg.freq_pd_sd if pd else cfg.freq_healthy_sd,
                    cfg.timing_cv_pd if pd else cfg.timing_cv_healthy,
                    cfg.decrement_pd if pd else cfg.decrement_healthy,
                    cfg.jerk_sd_pd if pd else 0.0)
                xy = _pose_sequence(rng, openness, hand, cfg)
                conf = rng.uniform(0.85, 1.0, size=(n_active, 21, 1))
                active = np.concatenate([xy, conf], axis=2)
                lead = rng.integers(0, cfg.lead_frames + 1, size=2)
                pieces, valid = [], []
                for n_pad, edge in ((lead[0], active[0]), (None, None), (lead[1], active[-1])):
                    if n_pad is None:
                        pieces.append(active)
                        valid.append(np.ones(n_active, dtype=bool))
                        continue
                    # hand entering/leaving: half undetected, half low confidence
                    pad = np.repeat(edge[None], n_pad, axis=0)
                    pad[:, :, 2] = rng.uniform(0.1, 0.4, size=(n_pad, 21))
                    ok = rng.random(n_pad) < 0.5
                    pad[~ok] = 0.0
                    pieces.append(pad)
                    valid.append(ok)
                frames = np.round(np.concatenate(pieces), 6)
                out.append(KeypointSequence(pid, hand, label, cfg.fps, frames,
                                            np.concatenate(valid), cls))
    return out


def synth_summary(sequences) -> dict:
    counts = {"sequences": len(sequences), "participants": len({s.participant_id for s in sequences})}
    for lab in LABELS:
        counts[lab] = sum(s.label == lab for s in sequences)
    counts["hidden_positive"] = sum(s.label == "unlabeled" and s.true_label == "positive"
                                    for s in sequences)
    counts["true_positive_class"] = sum(s.true_label == "positive" for s in sequences)
    return counts
