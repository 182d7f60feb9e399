import json

import numpy as np
import pytest

from decorgnn import decorrelation as dc
from decorgnn import encoder as enc
from decorgnn import harness as hn
from decorgnn import numcore as nc
from decorgnn.fileio import DataFormatError
from decorgnn.graphdata import SplitSpec, apply_split, gen_triangles_dataset


@pytest.fixture(scope="module")
def size_split():
    full = gen_triangles_dataset(200, 5, 16, rng_seed=42)
    return apply_split(full, SplitSpec(kind="by_size", train_max_nodes=10))


def small_cfg(**kw):
    base = dict(mode="ood_gnn", hidden_dim=16, epochs=2, seed=3,
                epochs_reweight=5)
    base.update(kw)
    return hn.TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValueError):
        hn.TrainConfig(mode="other")
    with pytest.raises(ValueError):
        hn.TrainConfig(batch_size=20)
    with pytest.raises(ValueError):
        hn.TrainConfig(lr=0.01)
    with pytest.raises(ValueError):
        hn.TrainConfig(num_layers=1)
    with pytest.raises(ValueError):
        hn.TrainConfig(num_layers=7)
    with pytest.raises(ValueError):
        hn.TrainConfig(k_groups=2, gammas=(0.5,))
    with pytest.raises(ValueError):
        hn.TrainConfig(k_groups=1, gammas=(1.0,))
    cfg = hn.TrainConfig(lr=1e-4, batch_size=16, k_groups=1, gammas=[0.9])
    assert cfg.gammas == (0.9,)


def test_standardize_centers_scales_and_guards_constants():
    rng = np.random.default_rng(0)
    z = rng.normal(loc=3.0, scale=2.5, size=(64, 4))
    z[:, 2] = 7.0
    out = hn._standardize(z)
    assert np.max(np.abs(out.mean(axis=0))) < 1e-12
    for j in (0, 1, 3):
        assert abs(out[:, j].std() - 1.0) < 1e-12
    assert np.all(out[:, 2] == 0.0)


def test_same_seed_gives_same_initial_model_across_modes(size_split):
    train_set, _ = size_split
    a = hn.init_model(small_cfg(mode="ood_gnn"), train_set.feature_dim, 10)
    b = hn.init_model(small_cfg(mode="baseline_uniform"),
                      train_set.feature_dim, 10)
    for pa, pb in zip(enc.parameters(a), enc.parameters(b)):
        assert np.array_equal(pa.value, pb.value)


def test_baseline_mode_never_invokes_reweighting(size_split):
    train_set, test_set = size_split
    before = dc.snapshot_counters()
    _, report = hn.train(train_set, test_set, small_cfg(mode="baseline_uniform"))
    assert dc.snapshot_counters() == before
    assert report.constraint_checks == 0
    assert report.final_weights is None
    assert all(r.objective is None for r in report.records)


def test_reweighted_run_counts_constraint_checks(size_split):
    train_set, test_set = size_split
    cfg = small_cfg(mode="ood_gnn", epochs=2, epochs_reweight=5)
    _, report = hn.train(train_set, test_set, cfg)
    batches_per_epoch = -(-len(train_set) // cfg.batch_size)
    assert report.constraint_checks == 2 * batches_per_epoch * 5
    assert report.constraint_violations == 0
    assert all(r.objective is not None for r in report.records)


def test_epoch_records_are_complete(size_split):
    train_set, test_set = size_split
    _, report = hn.train(train_set, test_set, small_cfg(epochs=3))
    assert [r.epoch for r in report.records] == [0, 1, 2]
    for r in report.records:
        assert np.isfinite(r.loss)
        assert 0.0 <= r.train_acc <= 1.0
        assert 0.0 <= r.test_acc <= 1.0
    assert report.final_test_acc == report.records[-1].test_acc


def test_ragged_last_batch_kept_without_memory(size_split):
    train_set, test_set = size_split
    # train split has 92 graphs; with batches of 32 the last batch holds 28
    assert len(train_set) % 32 != 0
    _, report = hn.train(train_set, test_set, small_cfg(k_groups=0))
    assert len(report.final_weights) == len(train_set)


def test_ragged_last_batch_dropped_with_memory(size_split):
    train_set, test_set = size_split
    cfg = small_cfg(k_groups=2, gammas=(0.5, 0.9))
    _, report = hn.train(train_set, test_set, cfg)
    full_batches = len(train_set) // cfg.batch_size
    assert len(report.final_weights) == full_batches * cfg.batch_size


def test_training_reduces_loss(size_split):
    train_set, test_set = size_split
    _, report = hn.train(train_set, test_set,
                         small_cfg(mode="baseline_uniform", epochs=10))
    assert report.records[-1].loss < report.records[0].loss


def test_evaluate_matches_whole_dataset_prediction(size_split):
    train_set, _ = size_split
    cfg = small_cfg(mode="baseline_uniform", epochs=1)
    model, _ = hn.train(train_set, train_set, cfg)
    acc = hn.evaluate(model, train_set, chunk=7)
    pred = enc.predict(model, train_set.graphs)
    want = float(np.mean(pred == [g.label for g in train_set.graphs]))
    assert acc == pytest.approx(want, abs=1e-12)


def test_divergence_error_names_epoch_and_batch(size_split, monkeypatch):
    train_set, test_set = size_split

    def explode(*args, **kwargs):
        raise nc.NonFiniteError("synthetic overflow")

    monkeypatch.setattr(hn.enc, "encode_batch", explode)
    with pytest.raises(enc.DivergenceError, match="epoch 0 batch 0"):
        hn.train(train_set, test_set, small_cfg(mode="baseline_uniform"))


def test_identical_runs_write_identical_stable_lines(size_split, tmp_path):
    train_set, test_set = size_split
    cfg = small_cfg(mode="ood_gnn", k_groups=1, gammas=(0.8,))
    model_a, report_a = hn.train(train_set, test_set, cfg)
    model_b, report_b = hn.train(train_set, test_set, cfg)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    hn.write_results(pa, report_a)
    hn.write_results(pb, report_b)
    assert hn.stable_lines(pa) == hn.stable_lines(pb)
    for ta, tb in zip(enc.parameters(model_a), enc.parameters(model_b)):
        assert np.array_equal(ta.value, tb.value)


def test_results_file_round_trip(size_split, tmp_path):
    train_set, test_set = size_split
    _, report = hn.train(train_set, test_set, small_cfg(epochs=2))
    path = tmp_path / "run.jsonl"
    hn.write_results(path, report)
    records, summary = hn.load_results(path)
    assert len(records) == 2
    assert all("wall_seconds" not in r for r in records)
    assert summary["config"]["mode"] == "ood_gnn"
    assert summary["wall_seconds"] > 0
    assert summary["final_test_acc"] == report.final_test_acc
    assert len(summary["final_weights"]) == len(report.final_weights)


def test_load_results_requires_summary(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "epoch", "epoch": 0}\n')
    with pytest.raises(DataFormatError):
        hn.load_results(path)
    path.write_text("not json\n")
    with pytest.raises(DataFormatError, match="bad.jsonl:1"):
        hn.load_results(path)


def test_weight_histogram_covers_all_weights(size_split):
    train_set, test_set = size_split
    _, report = hn.train(train_set, test_set, small_cfg())
    counts, edges = hn.weight_histogram(report, bins=10)
    assert counts.sum() == len(report.final_weights)
    assert len(edges) == 11
    _, baseline = hn.train(train_set, test_set,
                           small_cfg(mode="baseline_uniform", epochs=1))
    with pytest.raises(ValueError):
        hn.weight_histogram(baseline)


def test_checkpoint_round_trip(size_split, tmp_path):
    train_set, test_set = size_split
    model, _ = hn.train(train_set, test_set, small_cfg(epochs=1))
    path = tmp_path / "model.jsonl"
    hn.save_checkpoint(path, model)
    loaded, memory = hn.load_checkpoint(path)
    assert memory is None
    graphs = test_set.graphs[:20]
    assert np.array_equal(enc.predict(model, graphs),
                          enc.predict(loaded, graphs))
    for name, tensor in enc.named_parameters(model).items():
        assert np.array_equal(tensor.value,
                              enc.named_parameters(loaded)[name].value)


def test_checkpoint_round_trip_with_memory(size_split, tmp_path):
    from decorgnn import globalmem as gm
    train_set, test_set = size_split
    model, _ = hn.train(train_set, test_set, small_cfg(epochs=1))
    memory = gm.init_memory(2, batch_size=32, d=16, gammas=(0.3, 0.7))
    memory.z_groups[0] = np.random.default_rng(1).normal(size=(32, 16))
    path = tmp_path / "model.jsonl"
    hn.save_checkpoint(path, model, memory)
    _, restored = hn.load_checkpoint(path)
    assert restored.gammas == (0.3, 0.7)
    assert np.array_equal(restored.z_groups[0], memory.z_groups[0])


def test_checkpoint_rejects_bad_shapes(size_split, tmp_path):
    from decorgnn.fileio import load_manifest, save_manifest
    train_set, test_set = size_split
    model, _ = hn.train(train_set, test_set, small_cfg(epochs=1))
    path = tmp_path / "model.jsonl"
    hn.save_checkpoint(path, model)
    arrays = load_manifest(path)
    arrays["encoder.layer0.b1"] = np.zeros((1, 3))
    bad = tmp_path / "bad.jsonl"
    save_manifest(bad, arrays)
    with pytest.raises(DataFormatError, match="encoder.layer0.b1"):
        hn.load_checkpoint(bad)
    save_manifest(bad, {"unrelated": np.zeros((1, 1))})
    with pytest.raises(DataFormatError, match="not a model checkpoint"):
        hn.load_checkpoint(bad)


def test_probe_learning_rate_returns_allowed_value(size_split):
    train_set, _ = size_split
    cfg = small_cfg(mode="baseline_uniform", epochs=1)
    lr_a = hn.probe_learning_rate(train_set, cfg)
    lr_b = hn.probe_learning_rate(train_set, cfg)
    assert lr_a in hn.ALLOWED_LRS
    assert lr_a == lr_b


def test_run_experiment_writes_per_run_and_summary_files(tmp_path):
    summary = hn.run_experiment(
        "triangles_size_shift", seeds=[0], out_dir=tmp_path, count=80,
        overrides={"epochs": 2, "hidden_dim": 16, "epochs_reweight": 5})
    assert set(summary["per_mode"]) == set(hn.MODES)
    for mode in hn.MODES:
        stats = summary["per_mode"][mode]
        assert len(stats["test_accs"]) == 1
        assert 0.0 <= stats["mean"] <= 1.0
        assert (tmp_path / f"triangles_size_shift_seed0_{mode}.jsonl").exists()
    on_disk = json.loads(
        (tmp_path / "triangles_size_shift_summary.json").read_text())
    assert on_disk == summary
    assert summary["learning_rates"]["0"] in hn.ALLOWED_LRS


def test_run_experiment_rejects_unknown_name(tmp_path):
    with pytest.raises(ValueError, match="unknown experiment"):
        hn.run_experiment("other", seeds=[0], out_dir=tmp_path)
