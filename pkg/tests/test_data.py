import json

import numpy as np
import pytest

from pulsar_pd.data import (Clip, KeypointSequence, SchemaError, SynthConfig, augment_clip,
                            clean_sequence, flip_clip, generate_synthetic, parse_keypoint_file,
                            prepare_clips, segment_clips, split_by_participant, stack_clips,
                            synth_summary, write_keypoint_file)


def make_seq(n_frames, pid="p1", label="positive", invalid=(), hand="right"):
    rng = np.random.default_rng(len(pid) + n_frames)
    frames = rng.uniform(0.2, 0.8, size=(n_frames, 21, 3))
    frames[:, :, 2] = 0.9
    valid = np.ones(n_frames, dtype=bool)
    valid[list(invalid)] = False
    frames[~valid] = 0.0
    return KeypointSequence(pid, hand, label, 30.0, frames, valid)


def record(frames, **kw):
    rec = {"participant_id": "a", "hand": "left", "label": "unlabeled", "fps": 30, "frames": frames}
    rec.update(kw)
    return json.dumps(rec)


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert parse_keypoint_file(p) == []


def test_parse_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = [[0.5, 0.5, 1.0]] * 21
    p.write_text(record([good, [[0.5, 0.5, 1.0]] * 20]) + "\n")
    with pytest.raises(SchemaError, match="frame 1"):
        parse_keypoint_file(p)
    p.write_text(record([good]) + "\n{not json\n")
    with pytest.raises(SchemaError, match="line 2"):
        parse_keypoint_file(p)
    p.write_text(record([[[1.5, 0.5, 1.0]] * 21]) + "\n")
    with pytest.raises(SchemaError, match="outside"):
        parse_keypoint_file(p)
    p.write_text(record([good], hand="both") + "\n")
    with pytest.raises(SchemaError, match="hand"):
        parse_keypoint_file(p)
    p.write_text(record([good], label="negative") + "\n")
    with pytest.raises(SchemaError, match="label"):
        parse_keypoint_file(p)


def test_parse_keeps_null_frames(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text(record([None, [[0.1, 0.2, 0.9]] * 21]) + "\n")
    (seq,) = parse_keypoint_file(p)
    assert len(seq) == 2 and seq.valid.tolist() == [False, True]


def test_round_trip(tmp_path):
    seqs = generate_synthetic(SynthConfig(n_healthy=3, n_pd=3, seed=4))
    p = tmp_path / "rt.jsonl"
    write_keypoint_file(seqs, p)
    back = parse_keypoint_file(p)
    assert back == seqs
    assert all(b.true_label == s.true_label for b, s in zip(back, seqs))


def test_clean_sequence():
    assert len(clean_sequence(make_seq(100, invalid=range(10)))) == 90
    seq = make_seq(50)
    np.testing.assert_array_equal(clean_sequence(seq).frames, seq.frames)
    assert len(clean_sequence(make_seq(20, invalid=range(20)))) == 0


def test_low_confidence_frames_dropped_in_order():
    seq = make_seq(6)
    seq.frames[2, :, 2] = 0.3
    out = clean_sequence(seq)
    np.testing.assert_array_equal(out.frames, seq.frames[[0, 1, 3, 4, 5]])


def test_prepare_reports_skipped():
    clips, rep = prepare_clips([make_seq(20, invalid=range(20)), make_seq(79, pid="p2")])
    assert clips == [] and len(rep.sequences_skipped) == 2
    assert rep.sequences_skipped[0]["reason"] == "no valid frames"


def test_segmentation():
    clips = segment_clips(make_seq(200))
    assert len(clips) == 2 and all(c.data.shape == (2, 80, 21) for c in clips)
    assert segment_clips(make_seq(79)) == []
    seq = make_seq(160)
    a, b = segment_clips(seq)
    np.testing.assert_array_equal(a.data, seq.frames[:80, :, :2].transpose(2, 0, 1))
    np.testing.assert_array_equal(b.data, seq.frames[80:, :, :2].transpose(2, 0, 1))
    _, rep = prepare_clips([make_seq(200)])
    assert rep.frames_discarded_tail == 40


def test_augmentation():
    (clip,) = segment_clips(make_seq(80))
    four = augment_clip(clip)
    assert [c.augmentation for c in four] == ["id", "h", "v", "hv"]
    assert all(c.label == clip.label and c.data.shape == clip.data.shape for c in four)
    np.testing.assert_allclose(flip_clip(flip_clip(clip, "h"), "h").data, clip.data)
    point = Clip(np.zeros((2, 80, 21)), "p", "right", 0, "positive")
    point.data[0, 0, 0], point.data[1, 0, 0] = 0.3, 0.8
    hv = augment_clip(point)[3]
    np.testing.assert_allclose(hv.data[:, 0, 0], [0.7, 0.2])
    clips, _ = prepare_clips([make_seq(160), make_seq(80, pid="p2")], augment=True)
    assert len(clips) == 12


def test_split_by_participant():
    seqs = [make_seq(80, pid=f"p{i}", label="positive" if i < 5 else "unlabeled") for i in range(10)]
    tr, va = split_by_participant(seqs, 0.2, seed=3)
    assert len({s.participant_id for s in tr}) == 8 and len({s.participant_id for s in va}) == 2
    assert not {s.participant_id for s in tr} & {s.participant_id for s in va}
    assert sorted(s.label for s in va) == ["positive", "unlabeled"]
    tr2, va2 = split_by_participant(seqs, 0.2, seed=3)
    assert [s.participant_id for s in va] == [s.participant_id for s in va2]
    with pytest.raises(ValueError):
        split_by_participant(seqs[:1], 0.2, 0)


def test_generator_bookkeeping():
    seqs = generate_synthetic(SynthConfig(n_healthy=10, n_pd=200, contamination=0.3, seed=1,
                                          hands_per_participant=1))
    s = synth_summary(seqs)
    assert s["true_positive_class"] == 200
    # binomial(200, 0.3): mean 60, sd ~6.5
    assert abs(s["hidden_positive"] - 60) < 4 * np.sqrt(200 * 0.3 * 0.7)
    hidden = [q for q in seqs if q.label == "unlabeled" and q.true_label == "positive"]
    assert all(q.participant_id.startswith("pd") for q in hidden)
    assert all(q.true_label == "negative" for q in seqs if q.participant_id.startswith("hc"))


def test_generator_determinism(tmp_path):
    cfg = SynthConfig(n_healthy=4, n_pd=4, seed=9)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_keypoint_file(generate_synthetic(cfg), a)
    write_keypoint_file(generate_synthetic(cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_generator_values_in_range():
    seqs = generate_synthetic(SynthConfig(n_healthy=6, n_pd=6, seed=2))
    for s in seqs:
        assert np.all((s.frames >= 0) & (s.frames <= 1))


def aperture_frequency(seq):
    d = seq.frames[seq.valid][:, 4, :2] - seq.frames[seq.valid][:, 8, :2]
    ap = np.linalg.norm(d, axis=1)
    ap = ap - ap.mean()
    power = np.abs(np.fft.rfft(ap * np.hanning(len(ap)), n=1024))
    freqs = np.fft.rfftfreq(1024, 1 / seq.fps)
    band = freqs > 0.5
    return freqs[band][np.argmax(power[band])]


def test_frequency_oracle_separates_classes():
    seqs = generate_synthetic(SynthConfig(seed=0))
    pred = [aperture_frequency(s) < 3.0 for s in seqs]
    truth = [s.true_label == "positive" for s in seqs]
    assert np.mean(np.array(pred) == np.array(truth)) >= 0.9


def test_identical_classes_are_indistinguishable():
    cfg = SynthConfig(n_healthy=100, n_pd=100, freq_pd=4.0, freq_pd_sd=0.5, decrement_pd=0.0,
                      timing_cv_pd=0.05, jerk_sd_pd=0.0, jitter_sd=0.0, drift_sd=0.0, seed=5)
    seqs = generate_synthetic(cfg)
    from pulsar_pd.stats import auroc
    score = [aperture_frequency(s) for s in seqs]
    truth = [s.true_label == "positive" for s in seqs]
    assert abs(auroc(score, truth) - 0.5) <= 0.1


def test_config_validation():
    for bad in ({"freq_pd": 0}, {"contamination": 1.0}, {"n_pd": 0}, {"hand_scale": (0.3, 0.1)}):
        with pytest.raises(ValueError):
            SynthConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"speed": 1})


def test_stack_clips_labels():
    seqs = generate_synthetic(SynthConfig(n_healthy=4, n_pd=4, contamination=0.5, seed=3))
    arr = stack_clips(prepare_clips(seqs)[0])
    assert arr.X.shape[1:] == (2, 80, 21)
    assert np.all(arr.truth >= arr.observed)
