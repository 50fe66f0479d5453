import json

import numpy as np
import pytest

from pulsar_pd.cli import main
from pulsar_pd.data import parse_keypoint_file

SMALL_MODEL = """
[model]
channels = [8, 16]
temporal_kernel = 3
embed_channels = 2
dropout = 0.0
"""


def write_config(path, synth="", train="", extra=""):
    path.write_text(f"[synth]\n{synth}\n{SMALL_MODEL}\n[train]\n{train}\n{extra}\n")
    return path


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """A small contamination-free dataset with one fixed hand pose, and a config
    under which a small model overfits it."""
    d = tmp_path_factory.mktemp("toy")
    synth = ("n_healthy = 12\nn_pd = 12\ncontamination = 0.0\nhand_scale = [0.18, 0.18]\n"
             "centre_spread = 0.0\nrotation_sd = 0.0")
    cfg = write_config(d / "cfg.toml", synth=synth,
                       train="batch_size = 16\nlr = 0.01\nmax_epochs = 40")
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(d / "data.jsonl")]) == 0
    return d, cfg


def test_synth_counts_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["synth", "--seed", "1", "--out", str(a), "--contamination", "0.3"]) == 0
    table = capsys.readouterr().out
    assert main(["synth", "--seed", "1", "--out", str(b), "--contamination", "0.3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    seqs = parse_keypoint_file(a)
    assert len(seqs) == 200
    hidden = sum(s.label == "unlabeled" and s.true_label == "positive" for s in seqs)
    row = table.splitlines()[1].split()
    assert row[0] == "all" and int(row[1]) == 200 and int(row[4]) == hidden


def test_synth_test_split(tmp_path):
    tr, te = tmp_path / "tr.jsonl", tmp_path / "te.jsonl"
    assert main(["synth", "--seed", "2", "--out", str(tr), "--test-out", str(te)]) == 0
    ids_tr = {s.participant_id for s in parse_keypoint_file(tr)}
    ids_te = {s.participant_id for s in parse_keypoint_file(te)}
    assert ids_tr and ids_te and not ids_tr & ids_te


def test_config_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth]\nfreq_pd = -1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == 1
    bad.write_text("[nonsense]\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == 1
    assert main(["synth", "--config", str(tmp_path / "missing.toml"),
                 "--out", str(tmp_path / "x.jsonl")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "NOPE", "--data", "x", "--out", "y"])
    assert exc.value.code == 1


def test_json_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_healthy": 2, "n_pd": 2}}))
    out = tmp_path / "d.jsonl"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(parse_keypoint_file(out)) == 4


def test_data_errors_exit_2(tmp_path, toy):
    d, cfg = toy
    assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--variant", "JS",
                 "--out", str(tmp_path / "o")]) == 2
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{oops\n")
    assert main(["train", "--data", str(broken), "--variant", "JS", "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--checkpoints", str(tmp_path), "--data", str(d / "data.jsonl"),
                 "--out", str(tmp_path / "e")]) == 2


def test_pu_variant_without_positives(tmp_path):
    data = tmp_path / "u.jsonl"
    cfg = write_config(tmp_path / "c.toml", synth="n_healthy = 4\nn_pd = 4\ncontamination = 0.99")
    assert main(["synth", "--config", str(cfg), "--seed", "0", "--out", str(data)]) == 0
    assert not any(s.label == "positive" for s in parse_keypoint_file(data))
    assert main(["train", "--data", str(data), "--variant", "JS_PU", "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 1


def test_risk_mode_must_fit_variant(tmp_path, toy):
    d, cfg = toy
    assert main(["train", "--data", str(d / "data.jsonl"), "--variant", "JS", "--risk-mode", "pu",
                 "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def trained(toy, tmp_path_factory):
    d, cfg = toy
    out = tmp_path_factory.mktemp("js")
    assert main(["train", "--data", str(d / "data.jsonl"), "--variant", "JS", "--seed", "0",
                 "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_train_js_single_checkpoint(trained):
    plan = json.loads((trained / "plan.json").read_text())
    assert plan["checkpoints"] == {"joint": "joint.ckpt"}
    assert sorted(p.name for p in trained.iterdir()) == ["joint.ckpt", "plan.json", "train_log.jsonl"]


def test_train_is_deterministic(toy, trained, tmp_path):
    d, cfg = toy
    assert main(["train", "--data", str(d / "data.jsonl"), "--variant", "JS", "--seed", "0",
                 "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("joint.ckpt", "plan.json", "train_log.jsonl"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_eval_overfit_and_determinism(toy, trained, tmp_path):
    d, _ = toy
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for o in outs:
        assert main(["eval", "--checkpoints", str(trained), "--data", str(d / "data.jsonl"),
                     "--bootstrap", "120x20", "--seed", "7", "--out", str(o)]) == 0
    for name in ("metrics.json", "metrics.csv", "bootstrap.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    metrics = json.loads((outs[0] / "metrics.json").read_text())
    assert metrics["label_source"] == "true"
    assert metrics["metrics"]["fused"]["accuracy"] >= 0.95
    boot = json.loads((outs[0] / "bootstrap.json").read_text())
    assert len(boot["replicates"]) == 20


def test_pulsar_trains_four_streams_and_reports_them(toy, tmp_path):
    d, cfg = toy
    out = tmp_path / "pulsar"
    assert main(["train", "--data", str(d / "data.jsonl"), "--variant", "PULSAR", "--epochs", "1",
                 "--prior", "0.5", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("*.ckpt"))) == 4
    assert main(["eval", "--checkpoints", str(out), "--data", str(d / "data.jsonl"),
                 "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())["metrics"]
    assert set(metrics) == {"joint", "bone", "velocity", "acceleration", "fused"}


def fake_bootstrap(path, variant, column, seed=0):
    path.mkdir(parents=True, exist_ok=True)
    reps = [{"accuracy": a} for a in column]
    (path / "bootstrap.json").write_text(json.dumps(
        {"variant": variant, "n_participants": 120, "reps": len(column), "seed": seed,
         "replicates": reps}))
    return str(path)


def test_report_five_variants(tmp_path):
    rng = np.random.default_rng(0)
    dirs = [fake_bootstrap(tmp_path / v, v, rng.random(20)) for v in
            ("JS", "JS_PU", "JS_AC", "JS_AC_PU", "PULSAR")]
    out = tmp_path / "report.json"
    assert main(["report", *dirs, "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["df"] == 4
    assert rep["critical_value"] == pytest.approx(9.488, abs=5e-4)
    assert sum(rep["average_ranks"].values()) == pytest.approx(rep["rank_sum_per_replicate"])
    assert rep["rank_sum_per_replicate"] == 15


def test_report_identical_pair(tmp_path):
    col = np.linspace(0.5, 0.9, 20)
    dirs = [fake_bootstrap(tmp_path / "a", "A", col), fake_bootstrap(tmp_path / "b", "B", col)]
    out = tmp_path / "r.json"
    assert main(["report", *dirs, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["pairwise"][0]["p_holm"] == 1.0


def test_report_rejects_mismatched_draws(tmp_path):
    dirs = [fake_bootstrap(tmp_path / "a", "A", [0.5, 0.6], seed=0),
            fake_bootstrap(tmp_path / "b", "B", [0.5, 0.6], seed=1)]
    assert main(["report", *dirs]) == 2
    assert main(["report", dirs[0]]) == 1


def test_report_graph(tmp_path, capsys):
    assert main(["report", "--graph"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["natural_edges"]) == 20


def test_gradcheck_fault_injection(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--inject-fault", "softmax"]) == 3
    assert "softmax" in capsys.readouterr().err
    assert main(["gradcheck", "--seeds", "1", "--inject-fault", "nonexistent"]) == 1


@pytest.mark.slow
def test_gradcheck_default_run_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gradcheck", "--out", str(a)]) == 0
    assert main(["gradcheck", "--out", str(b)]) == 0
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    assert ra["max_error"] == rb["max_error"]
