"""Scripted experiments behind the CLI verbs.

Each command owns one output directory, re-derives every stage seed from the
run seed, and emits metrics plus JSON artifacts.  Rerunning a command with
the same config reproduces the same numbers (timing columns aside).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, replace

import numpy as np

from learngene import condense as cd
from learngene import inherit as ih
from learngene import netgraph as ng
from learngene import tasks
from learngene.numcore import SeededRng, derive_seed
from learngene.harness import baselines
from learngene.harness.checkpoint import write_checkpoint
from learngene.harness.config import save_config
from learngene.harness.metrics import MetricsRow, emit_metrics
from learngene.harness.train import evaluate, train_classifier


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class _Stage:
    """Marks the run directory incomplete while a stage is in flight."""

    def __init__(self, run_dir, name):
        self.marker = os.path.join(run_dir, "INCOMPLETE")
        self.name = name

    def __enter__(self):
        with open(self.marker, "w") as fh:
            fh.write(self.name + "\n")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.remove(self.marker)
            return False
        if not issubclass(exc_type, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _run_dir(config, command):
    path = os.path.join(config.out, f"{config.run_id}-{command}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _score_table_payload(result):
    return {
        "pair_scores": {f"{l},{k}": v for (l, k), v in
                        sorted(result.table.pair_scores.items())},
        "layer_scores": {str(l): v for l, v in sorted(result.table.layer_scores.items())},
        "normalized": {str(l): v for l, v in sorted(result.table.normalized.items())},
        "threshold": result.table.threshold,
        "selected": list(result.selected),
    }


def build_pools(config):
    """Dataset construction and the three-way class split."""
    data_seed = derive_seed(config.seed, "data")
    d = config.data
    if d.source == "image-folder":
        full = tasks.load_image_folder(d.path, resolution=d.shape[1:],
                                       channels=d.shape[0])
    else:
        full = tasks.make_synthetic(d.source, d.classes, d.per_class,
                                    shape=d.shape, seed=data_seed,
                                    separation=d.separation, noise=d.noise)
    s = config.splits
    plan = tasks.split_classes(full, (s.ancestry, s.condense, s.descendant),
                               meta_fraction=s.meta_fraction,
                               seed=derive_seed(config.seed, "split"))
    ancestry_ds = full.for_classes(plan.ancestry_classes, part="ancestry")
    condense_ds = full.for_classes(plan.condense_classes, part="condense")
    descendant_ds = full.for_classes(plan.descendant_classes, part="descendant")
    return plan, ancestry_ds, condense_ds, descendant_ds


def train_ancestry(config, ancestry_ds, rows=None, run_id=None):
    """Build and fit the ancestry network on its class split, then freeze it."""
    a = config.arch
    model = ng.build_model(a.family, a.depth, a.width,
                           num_classes=len(ancestry_ds.classes),
                           input_shape=config.data.shape,
                           seed=derive_seed(config.seed, "ancestry-init"),
                           heads=a.heads, patch=a.patch,
                           constant_width=a.constant_width)
    t0 = time.perf_counter()
    history = train_classifier(
        model, ancestry_ds, epochs=config.ancestry.epochs, lr=config.ancestry.lr,
        weight_decay=config.ancestry.weight_decay,
        batch_size=config.ancestry.batch_size,
        seed=derive_seed(config.seed, "ancestry-train"))
    if rows is not None:
        for rec in history:
            rows.append(MetricsRow(run_id or config.run_id, "ancestry", rec["epoch"],
                                   "train", rec["loss"], rec["accuracy"],
                                   time.perf_counter() - t0, config.seed))
    model.set_trainable(False)
    return model, history


def condense_stage(config, ancestry, condense_ds):
    """Meta/train pool split plus the bilevel condensation run."""
    meta_ds, train_ds = tasks.split_meta_train(
        condense_ds, meta_fraction=config.splits.meta_fraction,
        seed=derive_seed(config.seed, "pools"))
    ccfg = replace(config.condense, seed=derive_seed(config.seed, "condense"))
    result = cd.run_condensation(ancestry, train_ds, meta_ds, ccfg)
    return meta_ds, train_ds, result


def _auto_plan(bundle, config):
    """Descendant plan sized to the configured depth, grown if the selection
    needs more slots than that depth."""
    depth = config.condense.descendant_depth
    if bundle.family != "tiny-transformer":
        depth = max(depth, ih.minimal_descendant_depth(bundle))
        return ih.default_plan(bundle, num_classes=config.episode.n_way,
                               target_depth=depth)
    return ih.default_plan(bundle, num_classes=config.episode.n_way)


def _episode_for(config, descendant_ds, label):
    episode = tasks.sample_episode(
        descendant_ds, n_way=config.episode.n_way, k_shot=config.episode.k_shot,
        q_queries=config.episode.q_queries, seed=derive_seed(config.seed, label))
    if config.noise.ratio > 0:
        spec = tasks.NoiseSpec(ratio=config.noise.ratio,
                               seed=derive_seed(config.seed, label + "-noise"))
        episode = tasks.episode_with_noisy_support(episode, spec)
    return episode


def cmd_pipeline(config):
    """End to end: train ancestry, condense, extract, inherit, fine-tune."""
    run_dir = _run_dir(config, "pipeline")
    save_config(config, os.path.join(run_dir, "config.ini"))
    csv_path = os.path.join(run_dir, "metrics.csv")
    jsonl_path = os.path.join(run_dir, "metrics.jsonl")
    for stale in (csv_path, jsonl_path):
        if os.path.exists(stale):
            os.remove(stale)
    rows = []

    with _Stage(run_dir, "data"):
        plan, ancestry_ds, condense_ds, descendant_ds = build_pools(config)

    with _Stage(run_dir, "train-ancestry"):
        ancestry, _ = train_ancestry(config, ancestry_ds, rows)
        write_checkpoint(ancestry, os.path.join(run_dir, "ancestry.ckpt"))

    with _Stage(run_dir, "condense"):
        t0 = time.perf_counter()
        meta_ds, train_ds, result = condense_stage(config, ancestry, condense_ds)
        _write_json(os.path.join(run_dir, "score_table.json"),
                    _score_table_payload(result))
        if result.report is not None:
            _write_json(os.path.join(run_dir, "convergence.json"), {
                "grad_sq_norms": result.report.grad_sq_norms,
                "running_means": result.report.running_means,
                "first_quarter_mean": result.report.first_quarter_mean,
                "last_quarter_mean": result.report.last_quarter_mean,
                "ratio": result.report.ratio,
            })
            for i, (loss, g2) in enumerate(zip(result.meta_losses,
                                               result.report.grad_sq_norms)):
                rows.append(MetricsRow(config.run_id, "condense", i, "meta",
                                       loss, float("nan"),
                                       time.perf_counter() - t0, config.seed))

    with _Stage(run_dir, "extract"):
        bundle = ih.extract_learngene(ancestry, result.selected, table=result.table)
        write_checkpoint(bundle, os.path.join(run_dir, "bundle.ckpt"))

    with _Stage(run_dir, "inherit"):
        auto_plan = _auto_plan(bundle, config)
        descendant = ih.build_descendant(
            bundle, auto_plan, seed=derive_seed(config.seed, "descendant"))

    with _Stage(run_dir, "finetune"):
        episode = _episode_for(config, descendant_ds, "episode0")
        t0 = time.perf_counter()
        tune = replace(config.finetune, seed=derive_seed(config.seed, "finetune"))
        history = ih.finetune_descendant(descendant, episode, tune,
                                         forbidden_classes=plan.ancestry_classes)
        for rec in history:
            for split in ("support", "query"):
                rows.append(MetricsRow(config.run_id, "finetune", rec["epoch"], split,
                                       rec[f"{split}_loss"], rec[f"{split}_accuracy"],
                                       time.perf_counter() - t0, config.seed))
        write_checkpoint(descendant, os.path.join(run_dir, "descendant.ckpt"))

    emit_metrics(rows, csv_path, jsonl_path)
    summary = {
        "run_id": config.run_id,
        "seed": config.seed,
        "selected": list(result.selected),
        "ancestry_checksum": ancestry.checksum(),
        "ancestry_params": ancestry.param_count(),
        "bundle_params": bundle.param_count(),
        "descendant_params": descendant.param_count(),
        "final_query_accuracy": history[-1]["query_accuracy"],
    }
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def epochs_to_threshold(query_accuracies):
    """First epoch reaching 90% of the curve's own final accuracy."""
    final = query_accuracies[-1]
    threshold = 0.9 * final
    for epoch, acc in enumerate(query_accuracies):
        if acc >= threshold:
            return epoch
    return len(query_accuracies) - 1


def cmd_compare(config, methods=None, seeds=5):
    """Fine-tune one descendant per method on identical episodes and seeds."""
    methods = list(methods or baselines.METHODS)
    for m in methods:
        if m not in baselines.METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {baselines.METHODS}")
    run_dir = _run_dir(config, "compare")
    save_config(config, os.path.join(run_dir, "config.ini"))
    csv_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(csv_path):
        os.remove(csv_path)

    with _Stage(run_dir, "pipeline-artifacts"):
        plan, ancestry_ds, condense_ds, descendant_ds = build_pools(config)
        ancestry, _ = train_ancestry(config, ancestry_ds)
        meta_ds, train_ds, result = condense_stage(config, ancestry, condense_ds)
        bundle = ih.extract_learngene(ancestry, result.selected, table=result.table)
        auto_plan = _auto_plan(bundle, config)
        probe_x, probe_y = baselines.probe_batch(
            ancestry_ds, size=64, seed=derive_seed(config.seed, "probe"))

    rows = []
    curves = {m: [] for m in methods}
    with _Stage(run_dir, "compare"):
        for i in range(seeds):
            episode = _episode_for(config, descendant_ds, f"compare-episode{i}")
            init_seed = derive_seed(config.seed, f"compare-init{i}")
            tune = replace(config.finetune,
                           seed=derive_seed(config.seed, f"compare-tune{i}"))
            for method in methods:
                model = baselines.build_method_descendant(
                    method, ancestry, bundle, auto_plan,
                    probe_x=probe_x, probe_y=probe_y, seed=init_seed)
                t0 = time.perf_counter()
                history = ih.finetune_descendant(
                    model, episode, tune, forbidden_classes=plan.ancestry_classes)
                curve = [rec["query_accuracy"] for rec in history]
                curves[method].append(curve)
                for rec in history:
                    rows.append(MetricsRow(
                        f"{config.run_id}-s{i}", f"compare/{method}", rec["epoch"],
                        "query", rec["query_loss"], rec["query_accuracy"],
                        time.perf_counter() - t0, config.seed))

    emit_metrics(rows, csv_path)
    table = {}
    for method in methods:
        finals = [c[-1] for c in curves[method]]
        epochs = [epochs_to_threshold(c) for c in curves[method]]
        table[method] = {
            "final_accuracy_mean": float(np.mean(finals)),
            "final_accuracy_std": float(np.std(finals)),
            "epochs_to_threshold_mean": float(np.mean(epochs)),
            "epochs_to_threshold": epochs,
            "final_accuracies": finals,
        }
    payload = {"methods": table, "seeds": seeds, "selected": list(result.selected)}
    _write_json(os.path.join(run_dir, "comparison.json"), payload)
    return payload


def cmd_sweep(config, lr_grid=(0.01, 0.05, 0.1), wd_grid=(0.0, 1e-3),
              methods=("auto-learngene", "from-scratch"), seeds=2):
    """Hyperparameter sensitivity: accuracy range over an lr × wd grid."""
    if not lr_grid or not wd_grid:
        raise ValueError("sweep grids must be nonempty")
    run_dir = _run_dir(config, "sweep")
    save_config(config, os.path.join(run_dir, "config.ini"))

    with _Stage(run_dir, "pipeline-artifacts"):
        plan, ancestry_ds, condense_ds, descendant_ds = build_pools(config)
        ancestry, _ = train_ancestry(config, ancestry_ds)
        meta_ds, train_ds, result = condense_stage(config, ancestry, condense_ds)
        bundle = ih.extract_learngene(ancestry, result.selected, table=result.table)
        auto_plan = _auto_plan(bundle, config)
        probe_x, probe_y = baselines.probe_batch(
            ancestry_ds, size=64, seed=derive_seed(config.seed, "probe"))

    grid_rows = []
    per_method = {m: [] for m in methods}
    with _Stage(run_dir, "sweep"):
        for lr in lr_grid:
            for wd in wd_grid:
                for method in methods:
                    finals = []
                    for i in range(seeds):
                        episode = _episode_for(config, descendant_ds,
                                               f"sweep-episode{i}")
                        model = baselines.build_method_descendant(
                            method, ancestry, bundle, auto_plan,
                            probe_x=probe_x, probe_y=probe_y,
                            seed=derive_seed(config.seed, f"sweep-init{i}"))
                        tune = replace(config.finetune, lr=lr, weight_decay=wd,
                                       seed=derive_seed(config.seed, f"sweep-tune{i}"))
                        history = ih.finetune_descendant(
                            model, episode, tune,
                            forbidden_classes=plan.ancestry_classes)
                        finals.append(history[-1]["query_accuracy"])
                    mean_acc = float(np.mean(finals))
                    per_method[method].append(mean_acc)
                    grid_rows.append({"method": method, "lr": lr,
                                      "weight_decay": wd, "accuracy": mean_acc})

    ranges = {m: (float(np.max(v)) - float(np.min(v))) for m, v in per_method.items()}
    payload = {"grid": grid_rows, "ranges": ranges,
               "lr_grid": list(lr_grid), "wd_grid": list(wd_grid)}
    _write_json(os.path.join(run_dir, "sweep.json"), payload)
    return payload


def least_squares_slope(series):
    """Slope of the best-fit line through (index, value) points."""
    if len(series) < 2:
        return 0.0
    x = np.arange(len(series), dtype=np.float64)
    return float(np.polyfit(x, np.asarray(series, dtype=np.float64), 1)[0])


def cmd_evolution(config, num_tasks=25):
    """Sequential ancestry tasks; track descendant accuracy per task.

    The ancestry body persists across tasks (its head is rebuilt per task's
    class set); after each task the learngene is re-condensed and a fresh
    descendant fine-tuned on the fixed held-out episode family.
    """
    run_dir = _run_dir(config, "evolution")
    save_config(config, os.path.join(run_dir, "config.ini"))

    with _Stage(run_dir, "data"):
        plan, ancestry_ds, condense_ds, descendant_ds = build_pools(config)
        per_task = max(2, len(plan.ancestry_classes) // 2)
        streams = tasks.make_sequential_tasks(
            plan.ancestry_classes, num_tasks, classes_per_task=per_task,
            seed=derive_seed(config.seed, "evolution-tasks"))

    a = config.arch
    ancestry = ng.build_model(a.family, a.depth, a.width, num_classes=per_task,
                              input_shape=config.data.shape,
                              seed=derive_seed(config.seed, "ancestry-init"),
                              heads=a.heads, patch=a.patch,
                              constant_width=a.constant_width)
    series = []
    task_seeds = []
    with _Stage(run_dir, "evolution"):
        for t, class_ids in enumerate(streams):
            task_ds = ancestry_ds.for_classes(class_ids, part="ancestry")
            head_seed = derive_seed(config.seed, f"evolution-head{t}")
            head_spec = ancestry.layers[-1].spec
            ancestry.layers[-1] = ng.init_layer(
                head_spec, SeededRng(head_seed).child("head"))
            ancestry.set_trainable(True)
            train_classifier(
                ancestry, task_ds, epochs=config.ancestry.epochs,
                lr=config.ancestry.lr, weight_decay=config.ancestry.weight_decay,
                batch_size=config.ancestry.batch_size,
                seed=derive_seed(config.seed, f"evolution-train{t}"))
            ancestry.set_trainable(False)

            meta_ds, train_ds, result = condense_stage(config, ancestry, condense_ds)
            bundle = ih.extract_learngene(ancestry, result.selected,
                                          table=result.table)
            auto_plan = _auto_plan(bundle, config)
            desc_seed = derive_seed(config.seed, f"evolution-desc{t}")
            descendant = ih.build_descendant(bundle, auto_plan, seed=desc_seed)
            episode = _episode_for(config, descendant_ds, "evolution-episode")
            tune = replace(config.finetune,
                           seed=derive_seed(config.seed, "evolution-tune"))
            history = ih.finetune_descendant(
                descendant, episode, tune, forbidden_classes=plan.ancestry_classes)
            series.append(history[-1]["query_accuracy"])
            task_seeds.append(int(desc_seed))

    payload = {"series": series, "slope": least_squares_slope(series),
               "task_seeds": task_seeds, "num_tasks": num_tasks}
    _write_json(os.path.join(run_dir, "evolution.json"), payload)
    return payload


def planted_setup(config):
    """Synthetic condensation problem with a known common layer.

    Builds a briefly trained ancestry, copies its first conv block into each
    pseudo-descendant's first slot, and returns everything stability checks
    and convergence monitoring need.
    """
    plan, ancestry_ds, condense_ds, _ = build_pools(config)
    ancestry, _ = train_ancestry(config, ancestry_ds)
    meta_ds, train_ds = tasks.split_meta_train(
        condense_ds, meta_fraction=config.splits.meta_fraction,
        seed=derive_seed(config.seed, "pools"))

    depth = config.condense.descendant_depth

    def factory(num_classes, seed):
        model = cd.default_pseudo_descendant(ancestry, depth, num_classes, seed)
        return cd.plant_layer(model, ancestry, 1, 1)

    return ancestry, train_ds, meta_ds, factory


def cmd_stability(config, trials=10):
    """Planted-structure selection stability plus the convergence monitor."""
    run_dir = _run_dir(config, "stability")
    save_config(config, os.path.join(run_dir, "config.ini"))

    with _Stage(run_dir, "planted-setup"):
        ancestry, train_ds, meta_ds, factory = planted_setup(config)

    with _Stage(run_dir, "convergence"):
        ccfg = replace(config.condense, seed=derive_seed(config.seed, "condense"))
        result = cd.run_condensation(ancestry, train_ds, meta_ds, ccfg,
                                     descendant_factory=factory)
        _write_json(os.path.join(run_dir, "convergence.json"), {
            "grad_sq_norms": result.report.grad_sq_norms,
            "first_quarter_mean": result.report.first_quarter_mean,
            "last_quarter_mean": result.report.last_quarter_mean,
            "ratio": result.report.ratio,
        })

    with _Stage(run_dir, "stability"):
        report = cd.stability_check(ancestry, train_ds, meta_ds, ccfg,
                                    trials=trials, descendant_factory=factory)
        payload = {
            "seeds": [int(s) for s in report.seeds],
            "selections": [list(sel) for sel in report.selections],
            "modal_selection": list(report.modal_selection),
            "agreement": report.agreement,
            "planted_layer": 1,
            "planted_hits": sum(1 in sel for sel in report.selections),
            "convergence_ratio": result.report.ratio,
        }
        _write_json(os.path.join(run_dir, "stability.json"), payload)
    return payload
