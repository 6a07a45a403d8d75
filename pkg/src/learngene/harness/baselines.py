"""Comparison methods: descendants built by different selection rules.

All methods produce descendants with the same architecture family and depth
so fine-tuning comparisons differ only in which tensors are inherited.
"""

from __future__ import annotations

import copy
import warnings

import numpy as np

import learngene.numcore as nc
from learngene.inherit import DescendantPlan, build_descendant, default_plan, extract_learngene
from learngene.tasks import dense_labels

METHODS = ("auto-learngene", "from-scratch", "heur-learngene", "full-transfer")


def heuristic_select(ancestry, probe_x, probe_y, count):
    """Layers with the smallest mean absolute parameter gradient.

    The probe gradient is taken at the ancestry's final weights; a layer
    whose parameters barely move is treated as settled, common knowledge.
    Ties break toward the lower layer number.
    """
    if len(probe_x) == 0:
        raise ValueError("probe data must be nonempty")
    if not 1 <= count <= ancestry.depth:
        raise ValueError(f"count must lie in 1..{ancestry.depth}")

    twin = copy.deepcopy(ancestry)
    twin.set_trainable(True)
    logits = twin.forward(probe_x, train=False)
    nc.cross_entropy(logits, probe_y).backward()

    means = []
    for number in range(1, twin.depth + 1):
        layer = twin.counted_layer(number)
        total, count_elems = 0.0, 0
        for p in layer.params.values():
            if p.grad is not None:
                total += float(np.abs(p.grad).sum())
                count_elems += p.grad.size
        means.append((total / max(count_elems, 1), number))
    means.sort(key=lambda t: (t[0], t[1]))
    return sorted(number for _, number in means[:count])


def _fresh_plan(plan, bundle):
    """Same slot shapes as ``plan`` with every slot freshly initialized."""
    slots = []
    for slot in plan.slots:
        if slot[0] == "inherit":
            slots.append(("fresh", bundle.layer_for(slot[1]).spec))
        else:
            slots.append(slot)
    return DescendantPlan(tuple(slots), plan.head, plan.family)


def build_method_descendant(method, ancestry, auto_bundle, auto_plan,
                            probe_x=None, probe_y=None, seed=0):
    """One descendant per comparison method, shape-matched to the auto plan."""
    if method == "auto-learngene":
        return build_descendant(auto_bundle, auto_plan, seed=seed)
    if method == "from-scratch":
        return build_descendant(auto_bundle, _fresh_plan(auto_plan, auto_bundle),
                                seed=seed)
    if method == "heur-learngene":
        if probe_x is None or probe_y is None:
            raise ValueError("heur-learngene needs probe data")
        selected = heuristic_select(ancestry, probe_x, probe_y,
                                    count=len(auto_bundle.selected))
        bundle = extract_learngene(ancestry, selected)
        plan = default_plan(bundle, num_classes=auto_plan.head.out_dim,
                            target_depth=len(auto_plan.slots))
        return build_descendant(bundle, plan, seed=seed)
    if method == "full-transfer":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bundle = extract_learngene(ancestry, list(range(1, ancestry.depth + 1)))
        plan = default_plan(bundle, num_classes=auto_plan.head.out_dim,
                            target_depth=ancestry.depth)
        return build_descendant(bundle, plan, seed=seed)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def probe_batch(dataset, size, seed):
    """Deterministic probe subset with dense labels for heuristic selection."""
    from learngene.numcore import SeededRng
    rng = SeededRng(seed).child("probe")
    idx = rng.choice(len(dataset), size=min(size, len(dataset)), replace=False)
    idx = np.sort(idx)
    return dataset.inputs[idx], dense_labels(dataset.labels[idx], dataset.classes)
