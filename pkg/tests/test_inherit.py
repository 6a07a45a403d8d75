"""Bundle extraction, descendant assembly, and fine-tuning tests."""

import numpy as np
import pytest

from learngene import inherit as ih
from learngene import netgraph as ng
from learngene import tasks
from learngene.netgraph import LayerSpec
from learngene.numcore import SeededRng


def conv_ancestry(depth=5, width=4, classes=5, seed=3, shape=(1, 8, 8)):
    return ng.build_model("tiny-cnn", depth, width, classes, input_shape=shape, seed=seed)


def vit_ancestry(depth=4, width=8, classes=5, seed=3, shape=(1, 16, 16)):
    return ng.build_model("tiny-transformer", depth, width, classes,
                          input_shape=shape, seed=seed)


# ---- extraction ----


def test_extract_one_and_five_copies_exact_tensors():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 5])
    assert bundle.selected == (1, 5)
    for n in (1, 5):
        src = ancestry.counted_layer(n)
        dst = bundle.layer_for(n)
        assert dst.spec == src.spec
        for key in src.params:
            np.testing.assert_array_equal(dst.params[key].data, src.params[key].data)
            assert dst.params[key].data is not src.params[key].data
        for key in src.buffers:
            np.testing.assert_array_equal(dst.buffers[key], src.buffers[key])


def test_extract_does_not_mutate_ancestry():
    ancestry = conv_ancestry()
    before = ancestry.checksum()
    bundle = ih.extract_learngene(ancestry, [2, 3])
    bundle.layers[0].params["w"].data[...] = 0.0
    assert ancestry.checksum() == before


def test_extract_rejects_empty_and_bad_indices():
    ancestry = conv_ancestry()
    with pytest.raises(ValueError, match="empty"):
        ih.extract_learngene(ancestry, [])
    with pytest.raises(ValueError, match="ascending"):
        ih.extract_learngene(ancestry, [3, 1])
    with pytest.raises(ValueError, match="ascending"):
        ih.extract_learngene(ancestry, [2, 2])
    with pytest.raises(ValueError, match="outside"):
        ih.extract_learngene(ancestry, [0, 1])
    with pytest.raises(ValueError, match="outside"):
        ih.extract_learngene(ancestry, [6])


def test_extract_all_layers_warns_but_stays_compact():
    ancestry = conv_ancestry()
    with pytest.warns(UserWarning, match="every counted layer"):
        bundle = ih.extract_learngene(ancestry, [1, 2, 3, 4, 5])
    assert bundle.param_count() < ancestry.param_count()


def test_transformer_bundle_carries_preprocessing():
    ancestry = vit_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 2])
    kinds = [l.spec.kind for l in bundle.preprocessing]
    assert kinds == ["patch_embed"]


def test_score_table_hash_tracks_content():
    from learngene import condense as cd
    a = cd.normalize_scores({(1, 1): 0.5, (2, 1): 0.2})
    b = cd.normalize_scores({(1, 1): 0.5, (2, 1): 0.2})
    c = cd.normalize_scores({(1, 1): 0.5, (2, 1): 0.3})
    assert ih.score_table_hash(a) == ih.score_table_hash(b)
    assert ih.score_table_hash(a) != ih.score_table_hash(c)


# ---- plans and assembly ----


def test_default_conv_plan_places_endpoints_and_bridges():
    ancestry = conv_ancestry()  # widths 4, 8, 16, 32, 32
    bundle = ih.extract_learngene(ancestry, [1, 5])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=3)
    kinds = [s[0] for s in plan.slots]
    assert kinds == ["inherit", "fresh", "inherit"]
    bridge = plan.slots[1][1]
    assert bridge.in_dim == bundle.layer_for(1).spec.out_dim
    assert bridge.out_dim == bundle.layer_for(5).spec.in_dim


def test_degenerate_plan_is_bundle_stack_plus_head():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 2])
    plan = ih.default_plan(bundle, num_classes=3)
    assert [s[0] for s in plan.slots] == ["inherit", "inherit"]
    model = ih.build_descendant(bundle, plan, seed=9)
    assert model.depth == 2
    assert model.layers[-1].spec.kind == "classifier_head"


def test_six_of_twelve_transformer_blocks():
    ancestry = vit_ancestry(depth=12, width=8)
    bundle = ih.extract_learngene(ancestry, [1, 2, 3, 4, 5, 6])
    plan = ih.default_plan(bundle, num_classes=4)
    model = ih.build_descendant(bundle, plan, seed=1)
    assert model.depth == 6
    assert model.param_count() < ancestry.param_count()


def test_descendant_param_count_by_enumeration():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 5])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=3)
    model = ih.build_descendant(bundle, plan, seed=2)

    expected = 0
    for slot in plan.slots:
        if slot[0] == "inherit":
            expected += bundle.layer_for(slot[1]).param_count()
    for layer in model.layers:
        if layer.spec.kind == "classifier_head":
            expected += layer.param_count()
        elif not any(slot[0] == "inherit"
                     and bundle.layer_for(slot[1]).spec == layer.spec
                     for slot in plan.slots):
            expected += layer.param_count()
    assert model.param_count() == expected


def test_inherited_tensors_bit_equal_after_build():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 5])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=3)
    model = ih.build_descendant(bundle, plan, seed=2)
    for slot_number, anc_number in zip(model.provenance["inherited_layers"],
                                       model.provenance["ancestry_layers"]):
        got = model.counted_layer(slot_number)
        want = bundle.layer_for(anc_number)
        for key in want.params:
            np.testing.assert_array_equal(got.params[key].data, want.params[key].data)


def test_transformer_bottom_blocks_reproduce_ancestry_features_bitwise():
    ancestry = vit_ancestry(depth=4, width=8)
    bundle = ih.extract_learngene(ancestry, [1, 2])
    plan = ih.default_plan(bundle, num_classes=3)
    model = ih.build_descendant(bundle, plan, seed=7)

    x = SeededRng(11).normal(0, 1, (3, 1, 16, 16))
    _, anc_trace = ancestry.forward_collect(x, train=False)
    _, dec_trace = model.forward_collect(x, train=False)
    for m in range(2):
        np.testing.assert_array_equal(dec_trace[m].data, anc_trace[m].data)


def test_build_rejects_foreign_plan_layers():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 2])
    plan = ih.default_plan(bundle, num_classes=3)
    other = ih.extract_learngene(ancestry, [1, 5])
    with pytest.raises(ValueError, match="absent"):
        ih.build_descendant(other, plan, seed=0)


def test_build_rejects_shape_breaks():
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 5])
    bad = ih.DescendantPlan(
        slots=(("inherit", 1), ("inherit", 5)),
        head=LayerSpec("classifier_head", 32, 3, pool="gap"),
        family="tiny-cnn")
    with pytest.raises(ValueError, match="channels"):
        ih.build_descendant(bundle, bad, seed=0)


def test_build_rejects_oversized_descendants():
    ancestry = conv_ancestry(depth=2, width=4)
    bundle = ih.extract_learngene(ancestry, [1])
    wide = ih.DescendantPlan(
        slots=(("inherit", 1),
               ("fresh", LayerSpec("conv3x3_bn", 4, 64, activation="relu")),
               ("fresh", LayerSpec("conv3x3_bn", 64, 64, activation="relu"))),
        head=LayerSpec("classifier_head", 64, 3, pool="gap"),
        family="tiny-cnn")
    with pytest.raises(ValueError, match="smaller"):
        ih.build_descendant(bundle, wide, seed=0)


def test_plan_validation():
    with pytest.raises(ValueError, match="at least one"):
        ih.DescendantPlan(slots=(), head=LayerSpec("classifier_head", 4, 3, pool="gap"),
                          family="tiny-cnn")
    with pytest.raises(ValueError, match="classifier head"):
        ih.DescendantPlan(slots=(("inherit", 1),),
                          head=LayerSpec("dense", 4, 3), family="tiny-cnn")


def test_relative_placement_uses_ancestry_depth():
    ancestry = ng.build_model("tiny-cnn", 5, 4, 5, input_shape=(1, 8, 8),
                              seed=3, constant_width=True)
    bundle = ih.extract_learngene(ancestry, [1, 3])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=3)
    # layer 3 of 5 is halfway, so it lands in the middle slot, not the top
    assert plan.slots[1] == ("inherit", 3)
    assert plan.slots[2][0] == "fresh"


def test_adjacent_mismatched_layers_get_a_bridge():
    ancestry = conv_ancestry()  # widths 4, 8, 16, 32, 32
    bundle = ih.extract_learngene(ancestry, [1, 3])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=3)
    kinds = [s[0] for s in plan.slots]
    assert kinds == ["inherit", "fresh", "inherit"]
    bridge = plan.slots[1][1]
    assert bridge.in_dim == 4 and bridge.out_dim == 8


def test_minimal_depth_counts_bridges():
    ancestry = conv_ancestry()  # widths 4, 8, 16, 32, 32
    assert ih.minimal_descendant_depth(ih.extract_learngene(ancestry, [1, 5])) == 3
    assert ih.minimal_descendant_depth(ih.extract_learngene(ancestry, [1, 2])) == 2
    assert ih.minimal_descendant_depth(ih.extract_learngene(ancestry, [4, 5])) == 2


def test_geometric_bridge_widths_track_doubling():
    ancestry = conv_ancestry()  # widths 4, 8, 16, 32, 32
    bundle = ih.extract_learngene(ancestry, [1, 5])
    plan = ih.default_plan(bundle, num_classes=3, target_depth=5)
    fresh = [s[1] for s in plan.slots if s[0] == "fresh"]
    chain = [f.in_dim for f in fresh] + [fresh[-1].out_dim]
    assert chain[0] == 4 and chain[-1] == 32
    assert all(a < b for a, b in zip(chain, chain[1:]))


# ---- fine-tuning ----


def episode_for(model, seed=5, n_way=3, k_shot=4, query=4):
    ds = tasks.make_synthetic("gaussian-blobs", 5, 16, shape=model.input_shape,
                              seed=seed, separation=1.5)
    return tasks.sample_episode(ds, n_way=n_way, k_shot=k_shot, q_queries=query, seed=seed)


def small_descendant(seed=2):
    ancestry = conv_ancestry()
    bundle = ih.extract_learngene(ancestry, [1, 2])
    plan = ih.default_plan(bundle, num_classes=3)
    return ih.build_descendant(bundle, plan, seed=seed)


def test_zero_epochs_yields_single_row():
    model = small_descendant()
    episode = episode_for(model)
    rows = ih.finetune_descendant(model, episode, ih.FinetuneConfig(epochs=0))
    assert len(rows) == 1
    assert rows[0]["epoch"] == 0


def test_zero_lr_is_a_fixed_point():
    model = small_descendant()
    episode = episode_for(model)
    rows = ih.finetune_descendant(
        model, episode, ih.FinetuneConfig(epochs=3, lr=0.0))
    accs = {r["query_accuracy"] for r in rows}
    losses = {r["query_loss"] for r in rows}
    assert len(accs) == 1 and len(losses) == 1


def test_finetune_metric_stream_is_reproducible():
    def run():
        model = small_descendant(seed=4)
        episode = episode_for(model)
        return ih.finetune_descendant(
            model, episode, ih.FinetuneConfig(epochs=3, lr=0.05, seed=6))
    assert run() == run()


def test_finetune_rejects_ancestry_class_overlap():
    model = small_descendant()
    episode = episode_for(model)
    forbidden = [episode.class_ids[0]]
    with pytest.raises(ValueError, match="ancestry-training classes"):
        ih.finetune_descendant(model, episode, ih.FinetuneConfig(epochs=1),
                               forbidden_classes=forbidden)


def test_finetune_rejects_class_count_mismatch():
    model = small_descendant()
    ds = tasks.make_synthetic("gaussian-blobs", 5, 16, shape=model.input_shape,
                              seed=5, separation=1.5)
    episode = tasks.sample_episode(ds, n_way=4, k_shot=3, q_queries=3, seed=5)
    with pytest.raises(ValueError, match="classes"):
        ih.finetune_descendant(model, episode, ih.FinetuneConfig(epochs=1))


def test_freeze_inherited_pins_bundle_layers():
    model = small_descendant()
    episode = episode_for(model)
    counted = model.counted_indices
    inherited_idx = [counted[n - 1] for n in model.provenance["inherited_layers"]]
    before = {i: {k: v.data.copy() for k, v in model.layers[i].params.items()}
              for i in inherited_idx}
    head_before = model.layers[-1].params["w"].data.copy()
    ih.finetune_descendant(
        model, episode, ih.FinetuneConfig(epochs=2, lr=0.1, freeze_inherited=True))
    for i in inherited_idx:
        for k, v in model.layers[i].params.items():
            np.testing.assert_array_equal(v.data, before[i][k])
    assert not np.array_equal(model.layers[-1].params["w"].data, head_before)


def test_training_changes_inherited_layers_by_default():
    model = small_descendant()
    episode = episode_for(model)
    counted = model.counted_indices
    first = counted[model.provenance["inherited_layers"][0] - 1]
    before = model.layers[first].params["w"].data.copy()
    ih.finetune_descendant(model, episode, ih.FinetuneConfig(epochs=2, lr=0.1))
    assert not np.array_equal(model.layers[first].params["w"].data, before)


def test_finetune_accuracy_improves_on_blobs():
    model = small_descendant()
    episode = episode_for(model, seed=8, k_shot=8, query=6)
    rows = ih.finetune_descendant(
        model, episode, ih.FinetuneConfig(epochs=12, lr=0.1, seed=3))
    assert rows[-1]["support_accuracy"] > rows[0]["support_accuracy"]


# ---- bundle state round trip ----


def test_bundle_state_round_trip():
    ancestry = vit_ancestry(depth=3, width=8)
    bundle = ih.extract_learngene(ancestry, [1, 3])
    manifest, tensors = ih.bundle_state(bundle)
    back = ih.bundle_from_state(manifest, {k: v.copy() for k, v in tensors.items()})
    assert back.selected == bundle.selected
    assert back.family == bundle.family
    assert back.ancestry_checksum == bundle.ancestry_checksum
    assert back.ancestry_depth == bundle.ancestry_depth
    for a, b in zip(bundle.layers, back.layers):
        assert a.spec == b.spec
        for key in a.params:
            np.testing.assert_array_equal(a.params[key].data, b.params[key].data)
        for key in a.buffers:
            np.testing.assert_array_equal(a.buffers[key], b.buffers[key])
    for a, b in zip(bundle.preprocessing, back.preprocessing):
        assert a.spec == b.spec
        for key in a.params:
            np.testing.assert_array_equal(a.params[key].data, b.params[key].data)
