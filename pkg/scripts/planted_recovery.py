"""Planted-structure diagnostic for the condensation loop.

Copies ancestry layer 1 into slot 1 of the pseudo-descendant before
condensing.  A healthy run drives the meta-gradient energy down (last
quarter well under half the first quarter) and selects the planted layer in
every trial.

    python3 scripts/planted_recovery.py --trials 10
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import learngene.condense as cd
import learngene.netgraph as ng
import learngene.numcore as nc
import learngene.tasks as tasks
from learngene.numcore import SeededRng


def brief_train(model, ds, steps=60, batch=16, lr=0.05, seed=99):
    # the planted copy must carry trained batch-norm statistics, otherwise
    # the probe compares against an untrained layer and sees nothing special
    model.set_trainable(True)
    rng = SeededRng(seed)
    y_all = tasks.dense_labels(ds.labels, ds.classes)
    for _ in range(steps):
        idx = rng.choice(len(ds), size=min(batch, len(ds)), replace=False)
        logits = model.forward(ds.inputs[idx], train=True)
        nc.cross_entropy(logits, y_all[idx]).backward()
        nc.sgd_step(model.parameters(), lr=lr)
    model.set_trainable(False)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=10)
    parser.add_argument("--iterations", type=int, default=400)
    parser.add_argument("--planted-layer", type=int, default=1)
    args = parser.parse_args()

    ancestry = ng.build_model("tiny-cnn", 5, 6, 5, input_shape=(1, 8, 8),
                              seed=11)
    anc_ds = tasks.make_synthetic("gaussian-blobs", 5, 20, shape=(1, 8, 8),
                                  seed=21, separation=1.5)
    brief_train(ancestry, anc_ds)
    pool = tasks.make_synthetic("gaussian-blobs", 3, 30, shape=(1, 8, 8),
                                seed=12, separation=1.5)
    meta_ds, train_ds = tasks.split_meta_train(pool, meta_fraction=1 / 6,
                                               seed=12)
    config = cd.CondenseConfig(iterations=args.iterations, inner_lr=0.05,
                               meta_lr=1e-2, inner_batch=10, meta_batch=8,
                               descendant_depth=3, seed=13)

    def factory(num_classes, seed):
        model = cd.default_pseudo_descendant(ancestry, 3, num_classes, seed)
        return cd.plant_layer(model, ancestry, args.planted_layer, 1)

    t0 = time.time()
    result = cd.run_condensation(ancestry, train_ds, meta_ds, config,
                                 descendant_factory=factory)
    report = result.report
    print(f"single run: selected {result.selected}, meta-gradient energy "
          f"last/first quarter {report.last_quarter_mean:.4g}/"
          f"{report.first_quarter_mean:.4g} = {report.ratio:.3f} "
          f"[{time.time() - t0:.0f}s]", flush=True)

    t0 = time.time()
    stab = cd.stability_check(ancestry, train_ds, meta_ds, config,
                              trials=args.trials, descendant_factory=factory)
    hits = sum(args.planted_layer in sel for sel in stab.selections)
    print(f"stability: planted layer {args.planted_layer} selected in "
          f"{hits}/{args.trials} trials, agreement {stab.agreement:.2f}, "
          f"selections {[list(s) for s in stab.selections]} "
          f"[{time.time() - t0:.0f}s]", flush=True)


if __name__ == "__main__":
    main()
