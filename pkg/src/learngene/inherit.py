"""Learngene extraction and descendant assembly.

A bundle carries deep copies of the selected ancestry layers plus enough
provenance to audit lineage.  Descendants interleave those layers with fresh
seeded ones: transformer descendants keep the inherited blocks as the whole
encoder (preprocessing reused, head fresh); conv descendants place inherited
blocks at their relative depths and bridge channel mismatches with fresh conv
blocks.  Fine-tuning trains everything unless inherited layers are frozen
explicitly.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

import learngene.numcore as nc
from learngene.numcore import SeededRng, Tensor, sgd_step
from learngene.netgraph import (
    Layer,
    LayerSpec,
    Model,
    clone_layer,
    init_layer,
    spec_from_dict,
    spec_to_dict,
)


def score_table_hash(table) -> str:
    """Stable digest of a score table (pair scores + normalized weights)."""
    h = hashlib.sha256()
    for pair in sorted(table.pair_scores):
        h.update(repr(pair).encode())
        h.update(np.float64(table.pair_scores[pair]).tobytes())
    for layer in sorted(table.normalized):
        h.update(repr(layer).encode())
        h.update(np.float64(table.normalized[layer]).tobytes())
    return h.hexdigest()


@dataclass
class LearngeneBundle:
    """Selected ancestry layers with provenance; immutable by convention."""

    family: str
    selected: tuple          # 1-based ancestry layer numbers, ascending
    layers: list             # deep-copied Layer objects, ancestry order
    preprocessing: list      # deep-copied non-counted input layers (transformer)
    input_shape: tuple
    ancestry_checksum: str
    ancestry_param_count: int
    ancestry_depth: int
    score_hash: str = ""

    def param_count(self):
        n = sum(layer.param_count() for layer in self.layers)
        n += sum(layer.param_count() for layer in self.preprocessing)
        return n

    def layer_for(self, number):
        """Bundle layer matching ancestry layer ``number``."""
        return self.layers[self.selected.index(number)]


def extract_learngene(ancestry, selected, table=None):
    """Deep-copy the selected layers out of a finalized ancestry network.

    ``selected`` uses 1-based counted-layer numbers in ascending order.  The
    ancestry itself is never mutated; the bundle must be strictly smaller
    than the full network.
    """
    selected = tuple(int(s) for s in selected)
    if not selected:
        raise ValueError("cannot extract an empty learngene")
    if list(selected) != sorted(set(selected)):
        raise ValueError("selected layers must be ascending and unique")
    if selected[0] < 1 or selected[-1] > ancestry.depth:
        raise ValueError(f"selected layers {selected} outside 1..{ancestry.depth}")
    if len(selected) == ancestry.depth:
        warnings.warn("bundle keeps every counted layer; descendants can only "
                      "shrink through the head", stacklevel=2)

    layers = [clone_layer(ancestry.counted_layer(n)) for n in selected]
    preprocessing = []
    if ancestry.family == "tiny-transformer":
        counted = set(ancestry.counted_indices)
        for i, layer in enumerate(ancestry.layers):
            if i in counted or layer.spec.kind == "classifier_head":
                continue
            preprocessing.append(clone_layer(layer))

    bundle = LearngeneBundle(
        family=ancestry.family,
        selected=selected,
        layers=layers,
        preprocessing=preprocessing,
        input_shape=ancestry.input_shape,
        ancestry_checksum=ancestry.checksum(),
        ancestry_param_count=ancestry.param_count(),
        ancestry_depth=ancestry.depth,
        score_hash=score_table_hash(table) if table is not None else "",
    )
    if not bundle.param_count() < ancestry.param_count():
        raise ValueError("bundle must be strictly smaller than the ancestry")
    return bundle


@dataclass(frozen=True)
class DescendantPlan:
    """Slot sequence for a descendant: inherited layer numbers or fresh specs.

    Each slot is ("inherit", ancestry_layer_number) or ("fresh", LayerSpec).
    The head is always fresh.
    """

    slots: tuple
    head: LayerSpec
    family: str

    def __post_init__(self):
        if not self.slots:
            raise ValueError("a descendant needs at least one counted layer")
        for slot in self.slots:
            if slot[0] not in ("inherit", "fresh"):
                raise ValueError(f"unknown slot kind {slot[0]!r}")
        if self.head.kind != "classifier_head":
            raise ValueError("the final slot must be a classifier head")

    def inherited_numbers(self):
        return [s[1] for s in self.slots if s[0] == "inherit"]


def _slot_dims(slot, bundle):
    if slot[0] == "inherit":
        spec = bundle.layer_for(slot[1]).spec
    else:
        spec = slot[1]
    return spec.in_dim, spec.out_dim


def _check_closure(plan, bundle, first_in_dim):
    prev = first_in_dim
    for i, slot in enumerate(plan.slots):
        d_in, d_out = _slot_dims(slot, bundle)
        if d_in != prev:
            raise ValueError(
                f"plan slot {i} expects {d_in} input channels but receives {prev}")
        prev = d_out
    if plan.head.in_dim != prev:
        raise ValueError(f"head expects {plan.head.in_dim} features, got {prev}")


def minimal_descendant_depth(bundle):
    """Fewest slots a conv-family plan needs: one per inherited layer plus a
    bridge wherever consecutive inherited channel counts disagree."""
    needed = len(bundle.selected)
    for a, b in zip(bundle.selected, bundle.selected[1:]):
        if bundle.layer_for(a).spec.out_dim != bundle.layer_for(b).spec.in_dim:
            needed += 1
    return needed


def default_plan(bundle, num_classes, target_depth=None, fresh_kind="conv3x3_bn"):
    """Family-default descendant layout.

    Transformer: the inherited blocks are the whole encoder, original order.
    Conv families: inherited blocks sit at their relative ancestry depths;
    fresh conv blocks fill the gaps, adopting the inherited channel targets
    so the stack stays shape-closed.
    """
    if bundle.family == "tiny-transformer":
        if target_depth is not None and target_depth != len(bundle.selected):
            raise ValueError("transformer descendants use exactly the inherited blocks")
        slots = tuple(("inherit", n) for n in bundle.selected)
        width = bundle.layers[-1].spec.out_dim
        head = LayerSpec("classifier_head", width, num_classes, pool="token")
        return DescendantPlan(slots, head, bundle.family)

    if target_depth is None:
        target_depth = len(bundle.selected)
    if target_depth < len(bundle.selected):
        raise ValueError("target depth cannot drop inherited layers")

    # relative-depth placement: selected ancestry depth l of L maps to slot
    # round((l-1)/(L-1) * (D-1)); collisions shift later layers upward, and
    # mismatched channel counts force a bridging fresh slot between them
    L = bundle.ancestry_depth
    positions = []
    for n in bundle.selected:
        if L == 1 or target_depth == 1:
            pos = 0
        else:
            pos = int(round((n - 1) / (L - 1) * (target_depth - 1)))
        if positions and pos <= positions[-1]:
            pos = positions[-1] + 1
        positions.append(pos)
    changed = True
    while changed:
        changed = False
        for j in range(1, len(positions)):
            a = bundle.layer_for(bundle.selected[j - 1]).spec
            b = bundle.layer_for(bundle.selected[j]).spec
            gap = 2 if a.out_dim != b.in_dim else 1
            if positions[j] < positions[j - 1] + gap:
                positions[j] = positions[j - 1] + gap
                changed = True
    if positions[-1] > target_depth - 1:
        raise ValueError(
            f"target depth {target_depth} too small: the selection needs at "
            f"least {minimal_descendant_depth(bundle)} slots")

    # fresh runs between inherited anchors interpolate the channel count
    # geometrically, echoing the families' doubling progressions
    by_pos = dict(zip(positions, bundle.selected))
    slots = []
    prev_out = bundle.input_shape[0]
    i = 0
    while i < target_depth:
        if i in by_pos:
            slots.append(("inherit", by_pos[i]))
            prev_out = bundle.layer_for(by_pos[i]).spec.out_dim
            i += 1
            continue
        nxt = next((p for p in sorted(by_pos) if p > i), None)
        end = nxt if nxt is not None else target_depth
        gap = end - i
        if nxt is not None:
            target = bundle.layer_for(by_pos[nxt]).spec.in_dim
            for j in range(1, gap + 1):
                if j == gap:
                    out = target
                else:
                    out = max(1, int(round(prev_out * (target / prev_out) ** (1 / (gap - j + 1))))) \
                        if prev_out else target
                slots.append(("fresh", LayerSpec(fresh_kind, prev_out, out,
                                                 activation="relu")))
                prev_out = out
        else:
            for _ in range(gap):
                slots.append(("fresh", LayerSpec(fresh_kind, prev_out, prev_out,
                                                 activation="relu")))
        i = end
    head = LayerSpec("classifier_head", prev_out, num_classes, pool="gap")
    return DescendantPlan(tuple(slots), head, bundle.family)


def build_descendant(bundle, plan, seed=0):
    """Assemble a descendant model; inherited tensors are bit-equal copies."""
    if plan.family != bundle.family:
        raise ValueError(f"plan family {plan.family!r} does not match bundle "
                         f"{bundle.family!r}")
    inherited = plan.inherited_numbers()
    if any(n not in bundle.selected for n in inherited):
        raise ValueError("plan inherits layers absent from the bundle")

    rng = SeededRng(seed).child("descendant")
    layers = []
    if bundle.family == "tiny-transformer":
        layers.extend(clone_layer(l) for l in bundle.preprocessing)
        _check_closure(plan, bundle, _slot_dims(plan.slots[0], bundle)[0])
    else:
        _check_closure(plan, bundle, bundle.input_shape[0])

    inherited_numbers = []
    for i, slot in enumerate(plan.slots):
        if slot[0] == "inherit":
            layers.append(clone_layer(bundle.layer_for(slot[1])))
            inherited_numbers.append(slot[1])
        else:
            layers.append(init_layer(slot[1], rng.child(f"fresh{i}")))
    layers.append(init_layer(plan.head, rng.child("head")))

    model = Model(bundle.family, layers, plan.head.out_dim, bundle.input_shape,
                  role="descendant")
    if not model.param_count() < bundle.ancestry_param_count:
        raise ValueError("descendant must be strictly smaller than the ancestry")
    counted = model.counted_indices
    inherited_slots = [k for k, slot in enumerate(plan.slots) if slot[0] == "inherit"]
    model.provenance = {
        "ancestry_checksum": bundle.ancestry_checksum,
        "score_hash": bundle.score_hash,
        "inherited_layers": [k + 1 for k in inherited_slots],
        "ancestry_layers": list(inherited_numbers),
    }
    return model


@dataclass(frozen=True)
class FinetuneConfig:
    """Descendant adaptation hyperparameters."""

    epochs: int = 10
    lr: float = 0.05
    weight_decay: float = 0.0
    batch_size: int = 16
    freeze_inherited: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def _eval_split(model, x, y):
    with nc.no_grad():
        logits = model.forward(x, train=False)
        loss = float(nc.cross_entropy(logits, y).data)
        pred = np.argmax(logits.data, axis=1)
    return loss, float(np.mean(pred == y))


def finetune_descendant(model, episode, config, forbidden_classes=()):
    """Adapt a descendant on one episode; returns per-epoch metric rows.

    Row 0 is the untrained evaluation.  Support labels drive the updates;
    query metrics are purely held out.  ``forbidden_classes`` guards the
    split discipline: episode classes must not intersect it.
    """
    overlap = set(episode.class_ids) & set(int(c) for c in forbidden_classes)
    if overlap:
        raise ValueError(f"episode reuses ancestry-training classes {sorted(overlap)}")
    if model.num_classes != len(episode.class_ids):
        raise ValueError(f"model predicts {model.num_classes} classes, episode has "
                         f"{len(episode.class_ids)}")

    trainable = model.parameters()
    if config.freeze_inherited:
        inherited = set(model.provenance.get("inherited_layers", []))
        counted = model.counted_indices
        frozen_idx = {counted[n - 1] for n in inherited}
        trainable = [p for i, layer in enumerate(model.layers)
                     for p in layer.params.values() if i not in frozen_idx]
        for i in frozen_idx:
            for p in model.layers[i].params.values():
                p.requires_grad = False

    rng = SeededRng(config.seed).child("finetune")
    metrics = []

    def record(epoch):
        s_loss, s_acc = _eval_split(model, episode.support_x, episode.support_y)
        q_loss, q_acc = _eval_split(model, episode.query_x, episode.query_y)
        metrics.append({
            "epoch": epoch,
            "support_loss": s_loss, "support_accuracy": s_acc,
            "query_loss": q_loss, "query_accuracy": q_acc,
        })

    record(0)
    n = len(episode.support_y)
    for epoch in range(1, config.epochs + 1):
        if config.lr > 0:
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                logits = model.forward(episode.support_x[idx], train=True)
                loss = nc.cross_entropy(logits, episode.support_y[idx])
                loss.backward()
                sgd_step(trainable, lr=config.lr, weight_decay=config.weight_decay)
        record(epoch)
    return metrics


def bundle_state(bundle):
    """Flat tensor table plus manifest fields for checkpointing."""
    tensors = {}
    for j, layer in enumerate(bundle.layers):
        for key in sorted(layer.params):
            tensors[f"layers.{j}.{key}"] = layer.params[key].data
        for key in sorted(layer.buffers):
            tensors[f"layers.{j}.buf.{key}"] = layer.buffers[key]
    for j, layer in enumerate(bundle.preprocessing):
        for key in sorted(layer.params):
            tensors[f"pre.{j}.{key}"] = layer.params[key].data
        for key in sorted(layer.buffers):
            tensors[f"pre.{j}.buf.{key}"] = layer.buffers[key]
    manifest = {
        "family": bundle.family,
        "selected": list(bundle.selected),
        "input_shape": list(bundle.input_shape),
        "ancestry_checksum": bundle.ancestry_checksum,
        "ancestry_param_count": bundle.ancestry_param_count,
        "ancestry_depth": bundle.ancestry_depth,
        "score_hash": bundle.score_hash,
        "layer_specs": [spec_to_dict(l.spec) for l in bundle.layers],
        "pre_specs": [spec_to_dict(l.spec) for l in bundle.preprocessing],
    }
    return manifest, tensors


def bundle_from_state(manifest, tensors):
    """Rebuild a bundle from its checkpoint manifest and tensor table."""

    def rebuild(prefix, spec_dicts):
        out = []
        for j, sd in enumerate(spec_dicts):
            spec = spec_from_dict(sd)
            params, buffers = {}, {}
            for name, arr in tensors.items():
                if not name.startswith(f"{prefix}.{j}."):
                    continue
                key = name.split(".", 2)[2]
                if key.startswith("buf."):
                    buffers[key[4:]] = arr.copy()
                else:
                    params[key] = Tensor(arr.copy(), requires_grad=True)
            out.append(Layer(spec, params, buffers))
        return out

    return LearngeneBundle(
        family=manifest["family"],
        selected=tuple(manifest["selected"]),
        layers=rebuild("layers", manifest["layer_specs"]),
        preprocessing=rebuild("pre", manifest["pre_specs"]),
        input_shape=tuple(manifest["input_shape"]),
        ancestry_checksum=manifest["ancestry_checksum"],
        ancestry_param_count=int(manifest["ancestry_param_count"]),
        ancestry_depth=int(manifest["ancestry_depth"]),
        score_hash=manifest.get("score_hash", ""),
    )
