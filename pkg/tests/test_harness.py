import csv
import json
import math

import numpy as np
import pytest

from useradapt.harness import (Candidate, ConfigError, ExperimentConfig, candidates, emit_reports, load_record,
                               run_experiment, run_iid_variant, save_population, save_record, select,
                               summary_digest)
from useradapt.learner import AdaptationError
from useradapt.stream import correlation_mask, label_counts, save_streams
from useradapt.synth import SynthConfig, gen_collection

from conftest import stream_from_labels

SMALL = {"num_verbs": 5, "num_nouns": 6, "actions_per_user": 8, "stream_len": 120, "dim": 10}


def small_cfg(**kw):
    raw = {"schema_version": 1, "methods": ["SGD"], "memory_size": 8,
           "data": {"n_population": 3, "n_train": 2, "n_test": 3, "synthetic": SMALL},
           "pretrain": {"epochs": 2, "hidden": 6}}
    raw.update(kw)
    return ExperimentConfig.from_dict(raw)


@pytest.mark.parametrize("raw,match", [
    ({"schema_version": 2}, "schema_version"),
    ({"methods": ["SGD", "Adam"]}, "unknown method"),
    ({"methods": []}, "no methods"),
    ({"methods": ["ER-FIFO"], "memory_size": 0}, "memory_size"),
    ({"analyses": ["tsne"]}, "unknown analysis"),
    ({"colour": 1}, "unknown config keys"),
    ({"updates": [0]}, "updates"),
    ({"window": 0}, "window"),
    ({"optim": {"lr": -1}}, "lr"),
    ({"pretrain": {"enabled": False}}, "checkpoint"),
    ({"grid_search": True, "grid": {"lr": []}}, "grids"),
])
def test_config_validation(raw, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(raw)


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_config_round_trip():
    cfg = small_cfg(methods=["LWP", "ER-Reservoir"], window=None)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_grid_candidates_and_selection():
    cfg = small_cfg(grid_search=True, grid={"lr": [0.1, 0.01], "momentum": [0.0, 0.9], "nesterov": [False, True]})
    keys = [c.key() for c in candidates(cfg)]
    assert (0.1, 0.0, True) not in keys and len(keys) == 6
    scores = [(Candidate(0.1, 0.0, False), 5.0), (Candidate(0.01, 0.9, False), 5.0),
              (Candidate(0.01, 0.0, False), 5.0), (Candidate(0.001, 0.0, False), float("nan"))]
    assert select(scores).key() == (0.01, 0.0, False)
    with pytest.raises(AdaptationError):
        select([(Candidate(0.1, 0.0, False), float("nan"))])


def test_iid_variant():
    labels = [(0, 0)] * 6 + [(1, 1)] * 3 + [(2, 2)]
    s = stream_from_labels(labels, batch_size=3)
    shuffled = run_iid_variant(s, 1)
    assert label_counts(shuffled.labels()) == label_counts(s.labels())
    assert [len(b) for b in shuffled.batches] == [3, 3, 3, 1]
    single = stream_from_labels([(0, 0)])
    assert run_iid_variant(single, 0) is single
    # expected repeat rate of a random arrangement of the label multiset
    n = len(labels)
    pair = sum(c * (c - 1) for c in (6, 3, 1)) / (n * (n - 1))
    means = [correlation_mask(run_iid_variant(s, seed)).mean() for seed in range(3000)]
    assert np.mean(means) == pytest.approx(pair * (n - 1) / n, abs=0.01)


@pytest.fixture(scope="module")
def baseline_record():
    return run_experiment(small_cfg(methods=["Random", "LWP", "LWP_B", "SGD", "SGD-iid", "ER-HybridCBRS"]))


def test_lwp_has_no_losses(baseline_record):
    rows = {r["method"]: r for r in baseline_record["rows"]}
    assert math.isnan(rows["LWP"]["users"]["test000"]["oag_loss_action"])
    assert rows["LWP"]["aggregate"]["oag_loss_action"]["n"] == 0
    lwp, rnd = (rows[m]["aggregate"]["online_acc_action"]["mean"] for m in ("LWP", "Random"))
    assert lwp > rnd
    assert all(not r["failed"] for r in baseline_record["rows"])


def test_random_uses_uniform_logit_losses():
    from useradapt.harness import build_collection, population_model
    from useradapt.metrics import evaluate_stream
    cfg = small_cfg(methods=["Random"])
    col, _ = build_collection(cfg)
    pop = population_model(cfg, col)
    rec = run_experiment(cfg, col, pop)
    for s in col.test_users:
        ev = evaluate_stream(pop, s)
        rep = rec["rows"][0]["users"][s.user_id]
        assert rep["oag_loss_verb"] == pytest.approx(ev.loss_verb.mean() - math.log(5), rel=1e-12)
        assert rep["oag_loss_noun"] == pytest.approx(ev.loss_noun.mean() - math.log(6), rel=1e-12)


def test_frozen_sgd_record_is_zero():
    rec = run_experiment(small_cfg(methods=["SGD", "ER-FIFO"], optim={"lr": 0.0}))
    for row in rec["rows"]:
        for key, agg in row["aggregate"].items():
            if key.startswith(("oag", "hag")) or key == "avg_rf":
                assert agg["mean"] == 0.0, key


def test_determinism_and_parallelism():
    cfg = small_cfg(methods=["SGD", "ER-Reservoir", "Random"])
    a = summary_digest(run_experiment(cfg))
    cfg.parallel = 2
    assert summary_digest(run_experiment(cfg)) == a


def test_population_shared_across_methods(baseline_record):
    assert len(baseline_record["population_digest"]) == 64
    assert "wall_clock" in baseline_record


def test_grid_selection_on_tuning_users():
    cfg = small_cfg(grid_search=True, grid={"lr": [0.1, 0.0]})
    rec = run_experiment(cfg)
    row = rec["rows"][0]
    tuning = row["tuning"]
    best = select([(Candidate(t["lr"], t["momentum"], t["nesterov"]), t["oag_action"]) for t in tuning])
    assert row["selected"] == {"lr": best.lr, "momentum": best.momentum, "nesterov": best.nesterov}
    assert {t["lr"] for t in tuning} == {0.1, 0.0}


def test_emit_minimal_reports(tmp_path, baseline_record):
    written = emit_reports(baseline_record, tmp_path)
    assert sorted(p.name for p in written) == ["final.csv", "summary.json"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.csv", "summary.json"]
    with (tmp_path / "final.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    cols = ["method", "updates"] + [f"{m}_{l}" for m in ("oag", "hag") for l in ("action", "verb", "noun")]
    assert list(rows[0]) == cols + [f"se_{c}" for c in cols[2:]]
    for row, rec_row in zip(rows, baseline_record["rows"]):
        agg = rec_row["aggregate"]
        for c in cols[2:]:
            assert float(row[c]) == agg[c]["mean"] or (math.isnan(agg[c]["mean"]) and row[c] == "nan")
            assert float(row["se_" + c]) == agg[c]["se"] or math.isnan(agg[c]["se"])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "wall_clock" not in summary and summary["summary_digest"] == summary_digest(baseline_record)


def test_emit_unwritable(tmp_path, baseline_record):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports(baseline_record, blocker / "sub")


def test_record_round_trip(tmp_path, baseline_record):
    save_record(baseline_record, tmp_path / "record.json")
    back = load_record(tmp_path / "record.json")
    assert summary_digest(back) == summary_digest(baseline_record)


def test_all_analyses(tmp_path):
    cfg = small_cfg(methods=["LWP", "SGD", "SGD-head-only", "ER-FIFO"], update_grid=[1, 2],
                    analyses=["curves", "lwp", "finetune", "multi_update", "replay", "probe", "transfer",
                              "grads", "norms"], lwp_windows=[1, None])
    rec = run_experiment(cfg)
    names = {p.name for p in emit_reports(rec, tmp_path)}
    expected = {"summary.json", "final.csv", "lwp.csv", "finetune.csv", "multi_update.csv", "replay.csv",
                "probe.csv", "rf_bins.csv", "transfer.csv", "grad_cosine.csv", "norms.csv",
                "oag_curve_user_test000.csv"}
    assert expected <= names
    with (tmp_path / "lwp.csv").open() as fh:
        assert [r["window"] for r in csv.DictReader(fh)] == ["1", "all"]
    with (tmp_path / "multi_update.csv").open() as fh:
        ups = [(r["method"], r["updates"]) for r in csv.DictReader(fh)]
    assert ("SGD", "2") in ups and ("ER-FIFO", "2") in ups
    with (tmp_path / "oag_curve_user_test000.csv").open() as fh:
        curve = list(csv.DictReader(fh))
    assert {r["method"] for r in curve} == {"SGD", "SGD-head-only", "ER-FIFO"}


def test_jsonl_source_and_checkpoint(tmp_path):
    cfg = small_cfg()
    col = gen_collection(SynthConfig(**SMALL), 3, 2, 2)
    save_streams(col, tmp_path / "s.jsonl")
    rec1 = run_experiment(small_cfg(data={"jsonl": str(tmp_path / "s.jsonl"), "batch_size": 4}))
    from useradapt.harness import population_model
    pop = population_model(cfg, col)
    save_population(pop, tmp_path)
    rec2 = run_experiment(small_cfg(data={"jsonl": str(tmp_path / "s.jsonl"), "batch_size": 4},
                                    pretrain={"enabled": False, "checkpoint": str(tmp_path / "population")}))
    assert rec1["population_digest"] == rec2["population_digest"] == pop.digest()
    assert rec1["rows"][0]["aggregate"] == rec2["rows"][0]["aggregate"]
    with pytest.raises(ConfigError):
        run_experiment(small_cfg(pretrain={"enabled": False, "checkpoint": str(tmp_path / "nope")}))
