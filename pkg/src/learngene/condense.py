"""Bilevel condensation: score ancestry layers by how well a small trainable
network can reproduce their features, then select the common layers.

Inner step (training pool): one SGD step on
    L_total = L_cls + sum over pairs of score(l,k) * gap(l,k)
for the pseudo-descendant and the alignment maps, with the pair scores held
constant.  Meta step (meta pool): one SGD step on the scoring network, with
gaps held constant, at a cosine-annealed learning rate.  First-order only:
no unrolling through the inner update.

The ancestry stays frozen throughout; gradients never reach its parameters
because they are marked non-trainable, and a checksum guards the invariant.
Layer numbers are 1-based throughout this module.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import netgraph as ng
from . import numcore as nc
from .numcore import SeededRng, Tensor, derive_seed
from .tasks import dense_labels


@dataclass(frozen=True)
class CondenseConfig:
    iterations: int = 400
    inner_lr: float = 0.05
    meta_lr: float = 1e-4        # annealed to 0 over `iterations`
    inner_batch: int = 16
    meta_batch: int = 16
    descendant_depth: int = 3
    descendant_width: int = 0    # 0: reuse the ancestry's first-layer width
    score_bias_init: float = 3.0  # mid-range of the [0, 6] clamp
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.inner_batch < 1 or self.meta_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.descendant_depth < 1:
            raise ValueError("pseudo-descendant needs at least one layer")
        if not 0.0 <= self.score_bias_init <= 6.0:
            raise ValueError("score bias init must start inside the [0, 6] clamp")


@dataclass
class SimilarityRecord:
    """Squared feature difference for one (ancestry layer, descendant layer) pair."""

    pair: tuple
    per_element: Tensor  # (aligned descendant - ancestry)^2, full feature shape
    mean: Tensor         # scalar mean over batch and all feature axes


@dataclass
class ScoreTable:
    pair_scores: dict       # (l, k) -> float in [0, 6]
    layer_scores: dict      # l -> max over k
    normalized: dict        # l -> softmax weight over layers present
    threshold: float        # 1 / (total ancestry layer count)

    def ordered_layers(self):
        return sorted(self.layer_scores)


@dataclass
class ConvergenceReport:
    grad_sq_norms: list
    window: int
    running_means: list
    first_quarter_mean: float
    last_quarter_mean: float
    ratio: float


@dataclass
class StabilityReport:
    seeds: list
    selections: list        # tuple per trial
    modal_selection: tuple
    agreement: float        # fraction of trials equal to the mode


@dataclass
class CondenseResult:
    table: ScoreTable
    selected: list
    report: ConvergenceReport | None
    descendant: ng.Model
    alignment: "AlignmentMap"
    meta: "MetaNetwork"
    config: CondenseConfig
    cls_losses: list = field(default_factory=list)
    meta_losses: list = field(default_factory=list)


def candidate_pairs(ancestry_depth, descendant_depth):
    """All (l, k) combinations of counted layers; embeddings and heads are
    not counted layers, so they never enter the candidate set."""
    return [(l, k) for l in range(1, ancestry_depth + 1)
            for k in range(1, descendant_depth + 1)]


def pool_channels(feature):
    """Mean-pool a feature tensor down to its channel/width vector.

    (B,C,H,W) -> (C,), (B,P,D) -> (D,), (B,D) -> (D,).
    """
    if feature.ndim == 4:
        return feature.mean(axis=(0, 2, 3))
    if feature.ndim == 3:
        return feature.mean(axis=(0, 1))
    if feature.ndim == 2:
        return feature.mean(axis=0)
    raise ValueError(f"unsupported feature rank {feature.ndim}")


class MetaNetwork:
    """One affine map + relu6 clamp per candidate pair, over pooled features.

    The input to pair (l, k)'s scorer is the pooled ancestry feature of layer
    l, so its weight length equals that layer's channel count and never
    depends on spatial extent or batch size.  Weights start small and the
    bias mid-range: initial scores are then near-uniform, so the ordering
    that emerges reflects accumulated meta-gradient signal, not init noise,
    and the clamp has nonzero slope from the first step.
    """

    def __init__(self, channel_dims, pairs, seed=0, bias_init=3.0):
        rng = SeededRng(seed).child("meta_network")
        self.pairs = list(pairs)
        self.weights = {}
        self.biases = {}
        for pair in self.pairs:
            l = pair[0]
            dim = channel_dims[l]
            bound = 0.1 / math.sqrt(dim)
            r = rng.child(f"pair{pair}")
            self.weights[pair] = Tensor(r.uniform(-bound, bound, (dim,)), requires_grad=True)
            self.biases[pair] = Tensor(np.array(bias_init, dtype=np.float32),
                                       requires_grad=True)

    def parameters(self):
        out = []
        for pair in self.pairs:
            out.append(self.weights[pair])
            out.append(self.biases[pair])
        return out

    def score_pair(self, pair, pooled):
        pre = (self.weights[pair] * pooled).sum() + self.biases[pair]
        return nc.relu6(pre)


def score_pairs(ancestry_trace, meta):
    """Clamped affine score per candidate pair from the ancestry trace."""
    pooled = {}
    scores = {}
    for pair in meta.pairs:
        l = pair[0]
        if l not in pooled:
            pooled[l] = pool_channels(ancestry_trace[l - 1])
        scores[pair] = meta.score_pair(pair, pooled[l])
    return scores


class AlignmentMap:
    """Trainable per-pair adapters from descendant features onto ancestry shapes.

    Matching shapes use the identity; channel mismatches use a pointwise map
    (1x1 conv for NCHW features, a per-token linear map otherwise).  Spatial
    and token extents must already agree.
    """

    def __init__(self):
        self.modes = {}    # (l, k) -> "identity" | "pointwise"
        self.params = {}   # (l, k) -> {"w": Tensor, "b": Tensor}

    @classmethod
    def build(cls, ancestry_shapes, descendant_shapes, pairs, seed=0):
        """Shapes are per-example feature shapes keyed by 1-based layer number."""
        rng = SeededRng(seed).child("alignment")
        amap = cls()
        for pair in pairs:
            l, k = pair
            anc, dec = ancestry_shapes[l], descendant_shapes[k]
            if len(anc) != len(dec):
                raise ValueError(f"pair {pair}: feature ranks differ ({anc} vs {dec})")
            if anc == dec:
                amap.modes[pair] = "identity"
                continue
            if len(anc) == 3:  # (C, H, W): only the channel count may differ
                if anc[1:] != dec[1:]:
                    raise ValueError(f"pair {pair}: spatial extents differ ({anc} vs {dec})")
                cin, cout = dec[0], anc[0]
                r = rng.child(f"pair{pair}")
                amap.params[pair] = {
                    "w": Tensor(r.uniform(-1 / math.sqrt(cin), 1 / math.sqrt(cin),
                                          (cout, cin, 1, 1)), requires_grad=True),
                    "b": Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True),
                }
            elif len(anc) == 2:  # (P, D): only the width may differ
                if anc[0] != dec[0]:
                    raise ValueError(f"pair {pair}: token counts differ ({anc} vs {dec})")
                din, dout = dec[1], anc[1]
                r = rng.child(f"pair{pair}")
                amap.params[pair] = {
                    "w": Tensor(r.uniform(-1 / math.sqrt(din), 1 / math.sqrt(din),
                                          (din, dout)), requires_grad=True),
                    "b": Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True),
                }
            else:
                raise ValueError(f"pair {pair}: unsupported feature shape {dec}")
            amap.modes[pair] = "pointwise"
        return amap

    def align(self, pair, feature):
        if self.modes[pair] == "identity":
            return feature
        p = self.params[pair]
        if feature.ndim == 4:
            return nc.conv2d(feature, p["w"], p["b"], padding=0)
        return feature @ p["w"] + p["b"]

    def parameters(self):
        out = []
        for pair in sorted(self.params):
            out.append(self.params[pair]["w"])
            out.append(self.params[pair]["b"])
        return out


def pair_similarity(ancestry_feature, descendant_feature, alignment, pair):
    """Elementwise squared gap and its scalar mean for one candidate pair."""
    aligned = alignment.align(pair, descendant_feature)
    if aligned.shape != ancestry_feature.shape:
        raise ValueError(
            f"pair {pair}: aligned shape {aligned.shape} != ancestry {ancestry_feature.shape}")
    diff = aligned - ancestry_feature
    per_element = diff * diff
    return SimilarityRecord(pair=pair, per_element=per_element, mean=per_element.mean())


def meta_loss(scores, gaps):
    """Sum over candidate pairs of score * mean squared gap."""
    if set(scores) != set(gaps):
        raise ValueError("scores and gaps must cover the same candidate pairs")
    total = None
    for pair in sorted(scores):
        term = scores[pair] * gaps[pair]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no candidate pairs")
    return total


def _gap_means(ancestry_trace, descendant_trace, alignment, pairs):
    gaps = {}
    for pair in pairs:
        l, k = pair
        rec = pair_similarity(ancestry_trace[l - 1], descendant_trace[k - 1], alignment, pair)
        gaps[pair] = rec.mean
    return gaps


def inner_update(descendant, alignment, meta, ancestry, batch_x, batch_y, lr):
    """One SGD step on L_cls + sum(score * gap) for descendant and alignment.

    Pair scores enter as constants: they depend only on the frozen ancestry
    features and the scoring parameters, neither updated here.
    """
    with nc.no_grad():
        _, anc_trace = ancestry.forward_collect(batch_x, train=False)
        const_scores = {p: float(s.data)
                        for p, s in score_pairs(anc_trace, meta).items()}
    logits, desc_trace = descendant.forward_collect(batch_x, train=True)
    cls_loss = nc.cross_entropy(logits, batch_y)
    gaps = _gap_means(anc_trace, desc_trace, alignment, meta.pairs)
    match_term = meta_loss({p: Tensor(np.float32(v)) for p, v in const_scores.items()}, gaps)
    total = cls_loss + match_term
    total.backward()
    nc.sgd_step(descendant.parameters() + alignment.parameters(), lr)
    return {"cls": float(cls_loss.data), "match": float(match_term.data),
            "total": float(total.data)}


def meta_objective(ancestry, descendant, alignment, meta, batch_x):
    """Scoring-network loss sum(score * gap) with gaps held constant."""
    with nc.no_grad():
        _, anc_trace = ancestry.forward_collect(batch_x, train=False)
        _, desc_trace = descendant.forward_collect(batch_x, train=False)
        gaps = {p: Tensor(np.float32(float(g.data)))
                for p, g in _gap_means(anc_trace, desc_trace, alignment, meta.pairs).items()}
    scores = score_pairs(anc_trace, meta)
    return meta_loss(scores, gaps)


def meta_update(descendant, alignment, meta, ancestry, batch_x, lr):
    """One SGD step on the scoring parameters; returns (loss, ||grad||^2)."""
    loss = meta_objective(ancestry, descendant, alignment, meta, batch_x)
    loss.backward()
    grad_sq = nc.grad_sq_norm(meta.parameters())
    nc.sgd_step(meta.parameters(), lr)
    return float(loss.data), grad_sq


def normalize_scores(pair_scores, total_layers=None):
    """Reduce pair scores to per-layer scores and softmax weights.

    Per-layer score is the max over descendant partners.  The softmax runs
    over the layers present in the candidate set; the selection threshold is
    1/total_layers (defaulting to the number of layers present).
    """
    if not pair_scores:
        raise ValueError("empty score table")
    layers = sorted({l for (l, _k) in pair_scores})
    layer_scores = {
        l: max(float(v) for (ll, _k), v in pair_scores.items() if ll == l)
        for l in layers
    }
    vals = np.array([layer_scores[l] for l in layers], dtype=np.float64)
    shifted = vals - vals.max()
    weights = np.exp(shifted)
    weights = weights / weights.sum()
    normalized = {l: float(w) for l, w in zip(layers, weights)}
    total = total_layers if total_layers is not None else len(layers)
    return ScoreTable(
        pair_scores={p: float(v) for p, v in pair_scores.items()},
        layer_scores=layer_scores,
        normalized=normalized,
        threshold=1.0 / total,
    )


def select_learngene(table, total_layers=None):
    """Layers whose normalized weight strictly exceeds the threshold.

    Accepts a ScoreTable or a {layer: weight} mapping.  If nothing clears the
    threshold, fall back to the single best layer, lowest number on ties.
    """
    if isinstance(table, ScoreTable):
        normalized = table.normalized
        threshold = table.threshold if total_layers is None else 1.0 / total_layers
    else:
        normalized = dict(table)
        total = total_layers if total_layers is not None else len(normalized)
        threshold = 1.0 / total
    selected = sorted(l for l, w in normalized.items() if w > threshold)
    if selected:
        return selected
    best = max(sorted(normalized), key=lambda l: (normalized[l], -l))
    return [best]


def convergence_monitor(grad_sq_norms, window=25):
    """First-vs-last-quarter means of the squared meta-gradient norms."""
    norms = [float(v) for v in grad_sq_norms]
    if not norms:
        raise ValueError("no gradient norms recorded")
    if window < 1:
        raise ValueError("window must be positive")
    running = []
    acc = 0.0
    for i, v in enumerate(norms):
        acc += v
        if i >= window:
            acc -= norms[i - window]
        running.append(acc / min(i + 1, window))
    q = max(1, len(norms) // 4)
    first = float(np.mean(norms[:q]))
    last = float(np.mean(norms[-q:]))
    if first > 0:
        ratio = last / first
    else:
        ratio = 0.0 if last == 0 else math.inf
    return ConvergenceReport(
        grad_sq_norms=norms,
        window=window,
        running_means=running,
        first_quarter_mean=first,
        last_quarter_mean=last,
        ratio=ratio,
    )


def default_pseudo_descendant(ancestry, depth, num_classes, seed, width=0):
    """Same-family trainable network of the requested depth.

    Conv families default to a constant width equal to the ancestry's first
    counted layer; transformers reuse the ancestry width so every candidate
    pair aligns by identity.
    """
    first = ancestry.counted_layer(1).spec
    if width <= 0:
        width = first.out_dim
    return ng.build_model(
        ancestry.family, depth, width, num_classes,
        input_shape=ancestry.input_shape, seed=seed,
        role="pseudo-descendant", constant_width=True,
    )


def plant_layer(descendant, ancestry, source_layer, target_slot):
    """Copy one ancestry layer's parameters into a descendant slot in place."""
    src = ancestry.counted_layer(source_layer)
    dst = descendant.counted_layer(target_slot)
    if src.spec != dst.spec:
        raise ValueError(
            f"cannot plant {src.spec.kind} {src.spec.in_dim}->{src.spec.out_dim} "
            f"into {dst.spec.kind} {dst.spec.in_dim}->{dst.spec.out_dim}")
    for key, tensor in src.params.items():
        dst.params[key].data[...] = tensor.data
    for key, buf in src.buffers.items():
        dst.buffers[key] = buf.copy()
    return descendant


def _feature_shapes(model, probe_x):
    with nc.no_grad():
        _, trace = model.forward_collect(probe_x, train=False)
    return {i + 1: tuple(t.shape[1:]) for i, t in enumerate(trace)}


def _check_pools(train_ds, meta_ds):
    if train_ds.part != "condense-train" or meta_ds.part != "condense-meta":
        raise ValueError(
            f"condensation needs the condense-train/condense-meta pools, got "
            f"{train_ds.part!r} and {meta_ds.part!r}")
    overlap = set(train_ds.ids.tolist()) & set(meta_ds.ids.tolist())
    if overlap:
        raise ValueError(f"training and meta pools share example ids {sorted(overlap)[:5]}")
    if set(train_ds.classes) != set(meta_ds.classes):
        raise ValueError("training and meta pools must cover the same classes")


def run_condensation(ancestry, train_ds, meta_ds, config, descendant_factory=None):
    """Full bilevel loop; returns scores, selection, and the convergence report.

    ``descendant_factory(num_classes, seed)`` may override pseudo-descendant
    construction (used for planted-structure checks).  The ancestry must
    already be frozen; its bytes are checksummed before and after.
    """
    if any(p.requires_grad for p in ancestry.parameters()):
        raise ValueError("freeze the ancestry (set_trainable(False)) before condensation")
    _check_pools(train_ds, meta_ds)
    if config.inner_batch > len(train_ds):
        raise ValueError("inner batch exceeds the training pool")
    if config.meta_batch > len(meta_ds):
        raise ValueError("meta batch exceeds the meta pool")
    before = ancestry.checksum()
    classes = sorted(train_ds.classes)
    num_classes = len(classes)
    seed = config.seed
    if descendant_factory is None:
        descendant = default_pseudo_descendant(
            ancestry, config.descendant_depth, num_classes,
            seed=derive_seed(seed, "pseudo-descendant"), width=config.descendant_width)
    else:
        descendant = descendant_factory(num_classes, derive_seed(seed, "pseudo-descendant"))
    pairs = candidate_pairs(ancestry.depth, descendant.depth)

    probe = train_ds.inputs[:1]
    anc_shapes = _feature_shapes(ancestry, probe)
    dec_shapes = _feature_shapes(descendant, probe)
    alignment = AlignmentMap.build(anc_shapes, dec_shapes, pairs,
                                   seed=derive_seed(seed, "alignment"))
    channel_dims = {l: (s[0] if len(s) == 3 else s[-1]) for l, s in anc_shapes.items()}
    meta = MetaNetwork(channel_dims, pairs, seed=derive_seed(seed, "meta"),
                       bias_init=config.score_bias_init)

    batch_rng = SeededRng(derive_seed(seed, "batches"))
    train_y = dense_labels(train_ds.labels, classes)
    norms, cls_losses, meta_losses = [], [], []
    for step in range(config.iterations):
        idx = batch_rng.choice(len(train_ds), size=config.inner_batch, replace=False)
        losses = inner_update(descendant, alignment, meta, ancestry,
                              train_ds.inputs[idx], train_y[idx], config.inner_lr)
        cls_losses.append(losses["cls"])
        midx = batch_rng.choice(len(meta_ds), size=config.meta_batch, replace=False)
        lr_t = nc.cosine_lr(config.meta_lr, step, config.iterations)
        mloss, grad_sq = meta_update(descendant, alignment, meta, ancestry,
                                     meta_ds.inputs[midx], lr_t)
        meta_losses.append(mloss)
        norms.append(grad_sq)

    # final scores on the full meta pool, one deterministic evaluation
    with nc.no_grad():
        _, anc_trace = ancestry.forward_collect(meta_ds.inputs, train=False)
        final_scores = {p: float(s.data) for p, s in score_pairs(anc_trace, meta).items()}
    table = normalize_scores(final_scores, total_layers=ancestry.depth)
    selected = select_learngene(table)
    report = convergence_monitor(norms) if norms else None

    after = ancestry.checksum()
    if after != before:
        raise RuntimeError("ancestry parameters changed during condensation")
    return CondenseResult(
        table=table, selected=selected, report=report, descendant=descendant,
        alignment=alignment, meta=meta, config=config,
        cls_losses=cls_losses, meta_losses=meta_losses,
    )


def stability_check(ancestry, train_ds, meta_ds, config, trials, seeds=None,
                    descendant_factory=None):
    """Rerun condensation across pseudo-descendant seeds; report agreement.

    ``seeds`` overrides the derived per-trial seeds (repeating a seed must
    reproduce its selection bit-for-bit).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if seeds is None:
        seeds = [derive_seed(config.seed, f"trial{t}") for t in range(trials)]
    if len(seeds) != trials:
        raise ValueError("seed list must match the trial count")
    selections = []
    for s in seeds:
        result = run_condensation(ancestry, train_ds, meta_ds,
                                  replace(config, seed=int(s)),
                                  descendant_factory=descendant_factory)
        selections.append(tuple(result.selected))
    counts = Counter(selections)
    top = max(counts.values())
    modal = sorted([sel for sel, n in counts.items() if n == top])[0]
    return StabilityReport(
        seeds=[int(s) for s in seeds],
        selections=selections,
        modal_selection=modal,
        agreement=counts[modal] / trials,
    )
