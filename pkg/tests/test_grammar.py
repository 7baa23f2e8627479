"""Tests for gcm.grammar — entities, And/Or nodes, branches, forward, parse documents."""

import json

import numpy as np
import pytest


def _scorer(d: int, seed: int = 0):
    from gcm.tensor import Mlp2

    return Mlp2(d, d, 1, np.random.default_rng(seed))


def _leaves(config, clips):
    from gcm.grammar import stack_leaves

    return stack_leaves(clips, config)


# ── Parameters ─────────────────────────────────────────────────────────────────


class TestGcmParams:
    def test_full_model_pieces(self, small_config) -> None:
        from gcm.grammar import GcmParams

        names = GcmParams(small_config).named_parameters()
        for prefix in ("entity.actor", "branch.body.and", "branch.object.or", "concurrent.and", "lrci.pair.and", "lrci.or", "root"):
            assert any(n.startswith(prefix) for n in names), prefix
        assert "aux.primitive.w1" in names
        assert "aux.concurrent.w1" in names
        assert not any(n.startswith("primitive.and") for n in names)

    def test_disabled_branches_have_no_parameters(self, small_config) -> None:
        from dataclasses import replace

        from gcm.grammar import GcmParams

        config = replace(small_config, interactive_types=("body",) * 4)
        names = GcmParams(config).named_parameters()
        assert not any(n.startswith("branch.object") for n in names)
        assert not any(n.startswith("branch.human") for n in names)

    def test_baseline_only_has_head(self, small_config) -> None:
        from gcm.grammar import GcmParams

        names = GcmParams(small_config.with_layers(())).named_parameters()
        assert set(names) == {"baseline.w1", "baseline.b1", "baseline.w2", "baseline.b2"}

    def test_same_seed_same_values(self, small_config) -> None:
        from gcm.grammar import GcmParams

        a = GcmParams(small_config, seed=3).named_parameters()
        b = GcmParams(small_config, seed=3).named_parameters()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


# ── Entities ───────────────────────────────────────────────────────────────────


class TestEmbedEntities:
    def test_shapes(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, embed_entities

        ents = embed_entities(_leaves(small_config, small_clips), GcmParams(small_config))
        assert ents.actor.shape == (6, 8)
        assert ents.objects.shape == (6, 3, 8)
        assert ents.humans.shape == (6, 3, 8)

    def test_no_objects_gives_null_rows(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, embed_entities

        clip = small_clips[0]
        clip.objects = []
        params = GcmParams(small_config)
        ents = embed_entities(_leaves(small_config, [clip]), params)
        assert np.array_equal(ents.object_mask, np.zeros((1, 3)))
        for j in range(3):
            assert np.array_equal(ents.objects.data[0, j], params.null["object"].data)

    def test_list_order_is_ignored(self, small_config, small_clips, rng) -> None:
        import copy

        from gcm.grammar import GcmParams, embed_entities
        from gcm.synth import Candidate

        clip = small_clips[0]
        clip.objects = [Candidate(rng.normal(size=16), 0.9, (0.1, 0.1, 0.2, 0.2), j) for j in range(3)]
        other = copy.deepcopy(clip)
        other.objects = [other.objects[2], other.objects[0], other.objects[1]]
        params = GcmParams(small_config)
        a = embed_entities(_leaves(small_config, [clip]), params).objects.data[0]
        b = embed_entities(_leaves(small_config, [other]), params).objects.data[0]
        assert np.array_equal(a, b)

    def test_renumbered_candidates_permute_rows(self, small_config, small_clips, rng) -> None:
        from gcm.grammar import GcmParams, embed_entities
        from gcm.synth import Candidate

        feats = [rng.normal(size=16) for _ in range(3)]
        clip = small_clips[0]
        clip.objects = [Candidate(f, 0.9, (0.1, 0.1, 0.2, 0.2), j) for j, f in enumerate(feats)]
        params = GcmParams(small_config)
        a = embed_entities(_leaves(small_config, [clip]), params).objects.data[0]
        clip.objects = [Candidate(f, 0.9, (0.1, 0.1, 0.2, 0.2), j) for j, f in zip([2, 0, 1], feats)]
        b = embed_entities(_leaves(small_config, [clip]), params).objects.data[0]
        assert np.allclose(b, a[[1, 2, 0]], atol=1e-12, rtol=0)

    def test_wrong_leaf_dim(self, small_config, small_clips) -> None:
        from gcm.tensor import DimensionError

        small_clips[0].actor_feature = np.zeros(15)
        with pytest.raises(DimensionError):
            _leaves(small_config, small_clips)

    def test_truncates_to_most_confident(self, small_config, rng) -> None:
        from gcm.synth import Candidate, FeatureClip

        objects = [Candidate(rng.normal(size=16), conf, (0.1, 0.1, 0.2, 0.2), j) for j, conf in enumerate([0.1, 0.9, 0.5, 0.8, 0.2])]
        clip = FeatureClip("c", "v", 0, rng.normal(size=16), objects, [], np.zeros(4, dtype=np.int8))
        leaves = _leaves(small_config, [clip])
        assert leaves.object_ids[0].tolist() == [1, 2, 3]


# ── And / Or ───────────────────────────────────────────────────────────────────


class TestAndCompose:
    def test_output_width(self, rng) -> None:
        from gcm.grammar import and_compose
        from gcm.tensor import Mlp2, constant

        out = and_compose([constant(np.ones((2, 4))), constant(np.ones((2, 4)))], Mlp2(8, 8, 8, rng))
        assert out.shape == (2, 8)

    def test_zero_weights_give_zero(self, rng) -> None:
        from gcm.grammar import and_compose
        from gcm.tensor import Mlp2, constant

        mlp = Mlp2(6, 5, 5, rng)
        for p in mlp.parameters("m").values():
            p.data[...] = 0.0
        out = and_compose([constant(rng.normal(size=(3, 6)))], mlp)
        assert np.array_equal(out.data, np.zeros((3, 5)))

    def test_width_mismatch(self, rng) -> None:
        from gcm.grammar import and_compose
        from gcm.tensor import DimensionError, Mlp2, constant

        with pytest.raises(DimensionError):
            and_compose([constant(np.ones((2, 4)))], Mlp2(8, 8, 8, rng))

    def test_gradient_reaches_every_part(self, rng) -> None:
        from gcm.grammar import and_compose
        from gcm.tensor import Mlp2, parameter, total

        parts = [parameter(rng.normal(size=(2, 3))) for _ in range(3)]
        total(and_compose(parts, Mlp2(9, 9, 9, rng))).backward()
        assert all(np.abs(p.grad).sum() > 0 for p in parts)


class TestOrSelect:
    def test_single_candidate(self, rng) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant

        x = rng.normal(size=(1, 1, 4))
        res = or_select(constant(x), np.ones((1, 1)), _scorer(4))
        assert res.weights.data.tolist() == [[1.0]]
        assert np.array_equal(res.output.data, x[:, 0])

    def test_identical_candidates_split_evenly(self, rng) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant

        row = rng.normal(size=4)
        res = or_select(constant(np.stack([row, row])[None]), np.ones((1, 2)), _scorer(4))
        assert res.weights.data.tolist() == [[0.5, 0.5]]
        assert np.allclose(res.output.data[0], row, atol=1e-15)

    def test_all_masked(self, rng) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant

        res = or_select(constant(rng.normal(size=(1, 3, 4))), np.zeros((1, 3)), _scorer(4))
        assert np.array_equal(res.output.data, np.zeros((1, 4)))
        assert np.array_equal(res.weights.data, np.zeros((1, 3)))

    def test_no_candidates(self) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant

        res = or_select(constant(np.zeros((2, 0, 4))), np.zeros((2, 0)), _scorer(4))
        assert res.output.shape == (2, 4)

    def test_masked_rows_do_not_touch_present_ones(self, rng) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant

        x = rng.normal(size=(2, 4, 4))
        mask = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0]])
        other = x.copy()
        other[mask == 0] = rng.normal(size=4) * 1e6
        a = or_select(constant(x), mask, _scorer(4))
        b = or_select(constant(other), mask, _scorer(4))
        assert np.array_equal(a.weights.data, b.weights.data)
        assert np.array_equal(a.output.data, b.output.data)
        assert np.array_equal(a.logits[mask == 0], np.zeros(3))

    def test_randomized_contracts(self) -> None:
        from gcm.grammar import or_select
        from gcm.tensor import constant, softmax

        rng = np.random.default_rng(11)
        scorer = _scorer(5, seed=2)
        for _ in range(10_000):
            n = int(rng.integers(1, 6))
            x = rng.normal(size=(1, n, 5))
            mask = np.where(rng.random((1, n)) < 0.3, 0.0, 1.0)
            mask[0, rng.integers(n)] = 1.0
            res = or_select(constant(x), mask, scorer)
            w = res.weights.data[0]
            assert abs(w.sum() - 1.0) < 1e-6
            assert (w[mask[0] == 0] == 0.0).all()

            perm = rng.permutation(n)
            res_p = or_select(constant(x[:, perm]), mask[:, perm], scorer)
            assert np.allclose(res_p.weights.data[0], w[perm], atol=1e-9, rtol=0)
            assert np.allclose(res_p.output.data, res.output.data, atol=1e-9, rtol=0)

            padded = np.concatenate([x, rng.normal(size=(1, 1, 5))], axis=1)
            res_m = or_select(constant(padded), np.concatenate([mask, [[0.0]]], axis=1), scorer)
            assert res_m.weights.data[0, n] == 0.0
            assert np.array_equal(res_m.weights.data[0, :n], w)
            assert np.array_equal(res_m.output.data, res.output.data)

            c = float(rng.uniform(0.1, 10.0))
            scaled = softmax(constant(res.logits * c), mask=mask).data[0]
            keep = mask[0] > 0
            assert np.argmax(np.where(keep, scaled, -1)) == np.argmax(np.where(keep, w, -1))


# ── Branches, concurrent, root ─────────────────────────────────────────────────


class TestBranches:
    def test_body_branch(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, embed_entities, primitive_branch

        params = GcmParams(small_config)
        out, record = primitive_branch(embed_entities(_leaves(small_config, small_clips), params), "body", params)
        assert out.shape == (6, 12)
        assert record is None

    def test_object_branch(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, embed_entities, primitive_branch

        params = GcmParams(small_config)
        out, record = primitive_branch(embed_entities(_leaves(small_config, small_clips), params), "object", params)
        assert out.shape == (6, 12)
        assert record is not None and record.weights.shape == (6, 3)

    def test_all_masked_object_branch(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, embed_entities, primitive_branch

        clip = small_clips[0]
        clip.objects = []
        params = GcmParams(small_config)
        out, record = primitive_branch(embed_entities(_leaves(small_config, [clip]), params), "object", params)
        assert np.array_equal(out.data, np.zeros((1, 12)))
        assert np.array_equal(record.weights.data, np.zeros((1, 3)))

    def test_disabled_branch_is_zero(self, small_config, small_clips) -> None:
        from dataclasses import replace

        from gcm.grammar import GcmParams, embed_entities, primitive_branch

        config = replace(small_config, interactive_types=("body", "object", "body", "body"))
        params = GcmParams(config)
        out, record = primitive_branch(embed_entities(_leaves(config, small_clips), params), "human", params)
        assert np.array_equal(out.data, np.zeros((6, 12)))
        assert record is None

    def test_concurrent_zero_inputs(self, rng) -> None:
        from gcm.grammar import concurrent_compose
        from gcm.tensor import Mlp2, constant

        mlp = Mlp2(12, 4, 4, rng)
        zeros = [constant(np.zeros((2, 4))) for _ in range(3)]
        assert np.array_equal(concurrent_compose(zeros, mlp).data, np.zeros((2, 4)))

    def test_concurrent_needs_three(self, rng) -> None:
        from gcm.grammar import concurrent_compose
        from gcm.tensor import Mlp2, constant

        with pytest.raises(ValueError):
            concurrent_compose([constant(np.zeros((1, 4)))] * 2, Mlp2(8, 4, 4, rng))

    def test_classify_eval_is_deterministic(self, rng) -> None:
        from gcm.grammar import classify
        from gcm.tensor import Mlp2, constant

        head = Mlp2(12, 12, 4, rng)
        x = constant(rng.normal(size=(3, 12)))
        a = classify(x, head, 0.5, training=False).data
        b = classify(x, head, 0.5, training=False).data
        assert np.array_equal(a, b)

    def test_classify_training_reproducible(self, rng) -> None:
        from gcm.grammar import classify
        from gcm.tensor import Mlp2, constant

        head = Mlp2(12, 12, 4, rng)
        x = constant(rng.normal(size=(3, 12)))
        a = classify(x, head, 0.5, True, np.random.default_rng(1)).data
        b = classify(x, head, 0.5, True, np.random.default_rng(1)).data
        assert np.array_equal(a, b)


# ── Forward ────────────────────────────────────────────────────────────────────


class TestForward:
    def _views(self, config, leaves):
        from gcm.memory import MemoryBank

        bank = MemoryBank(config.d_map, config.t_window)
        bank.write(leaves.video_ids[0], leaves.clip_times[0] - 1, np.ones(config.d_map))
        return [bank.read_window(v, t) for v, t in zip(leaves.video_ids, leaves.clip_times)]

    def test_full_model(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        leaves = _leaves(small_config, small_clips)
        result = forward(leaves, GcmParams(small_config), self._views(small_config, leaves))
        assert result.maps.logits.shape == (6, 4)
        assert result.maps.concurrent_star is not None
        tree = result.trees[0]
        assert [r.name for r in tree.or_nodes] == ["object", "human"]
        assert tree.lrci is not None and len(tree.lrci.timestamps) == 6
        assert set(result.maps.aux_logits) == {"primitive", "concurrent"}

    def test_lrci_needs_views(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        with pytest.raises(ValueError):
            forward(_leaves(small_config, small_clips), GcmParams(small_config))

    def test_primitive_top(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        config = small_config.with_layers(("primitive",))
        result = forward(_leaves(config, small_clips), GcmParams(config))
        assert result.maps.primitive is not None
        assert result.maps.concurrent is None
        assert result.trees[0].lrci is None

    def test_concurrent_top(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        config = small_config.with_layers(("primitive", "concurrent"))
        result = forward(_leaves(config, small_clips), GcmParams(config))
        assert result.maps.concurrent is not None
        assert result.maps.concurrent_star is None
        assert set(result.maps.aux_logits) == {"primitive"}

    def test_baseline(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        config = small_config.with_layers(())
        result = forward(_leaves(config, small_clips), GcmParams(config))
        assert result.maps.logits.shape == (6, 4)
        assert result.trees[0].or_nodes == []

    def test_object_permutation_leaves_logits(self, small_config, small_clips) -> None:
        import copy

        from gcm.grammar import GcmParams, forward

        from gcm.synth import Candidate

        config = small_config.with_layers(("primitive", "concurrent"))
        params = GcmParams(config)
        rng = np.random.default_rng(9)
        feats = [rng.normal(size=16) for _ in range(3)]
        clip = small_clips[0]
        clip.objects = [Candidate(f, 0.9, (0.1, 0.1, 0.2, 0.2), j) for j, f in enumerate(feats)]
        other = copy.deepcopy(clip)
        other.objects = [Candidate(f, 0.9, (0.1, 0.1, 0.2, 0.2), j) for j, f in zip([2, 0, 1], feats)]
        a = forward(_leaves(config, [clip]), params).maps.logits.data
        b = forward(_leaves(config, [other]), params).maps.logits.data
        assert np.allclose(a, b, atol=1e-9, rtol=0)

    def test_eval_forward_is_bitwise_repeatable(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        config = small_config.with_layers(("primitive", "concurrent"))
        params = GcmParams(config)
        leaves = _leaves(config, small_clips)
        assert np.array_equal(forward(leaves, params).maps.logits.data, forward(leaves, params).maps.logits.data)

    def test_full_gradient_matches_finite_differences(self, small_config) -> None:
        from gcm.train import gradient_check

        errors = gradient_check(small_config, seed=0)
        assert max(errors.values()) < 1e-4

    def test_role_embeddings_forward_and_gradient(self, small_config, small_clips) -> None:
        from dataclasses import replace

        from gcm.grammar import GcmParams, forward
        from gcm.train import gradient_check

        config = replace(small_config, role_embeddings=True)
        params = GcmParams(config)
        assert params.named_parameters()["role"].shape == (3, 16)
        leaves = _leaves(config, small_clips)
        result = forward(leaves, params, self._views(config, leaves))
        assert result.maps.logits.shape == (6, 4)
        errors = gradient_check(config, seed=0)
        assert "role" in errors
        assert max(errors.values()) < 1e-4

    def test_concurrent_maps_match_forward(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, concurrent_maps, forward

        params = GcmParams(small_config)
        leaves = _leaves(small_config, small_clips)
        fwd = forward(leaves, params, self._views(small_config, leaves))
        assert np.array_equal(concurrent_maps(leaves, params), fwd.maps.concurrent.data)


# ── Parse documents ────────────────────────────────────────────────────────────


class TestParseDocument:
    def test_field_order(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, extract_parse, forward

        config = small_config.with_layers(("primitive", "concurrent"))
        tree = forward(_leaves(config, small_clips), GcmParams(config)).trees[0]
        doc = json.loads(extract_parse(tree))
        assert list(doc) == ["clip_id", "actor_id", "or_nodes", "lrci", "logits", "classes_over_threshold"]
        assert list(doc["or_nodes"][0]) == ["name", "candidate_ids", "lambdas", "argmax"]
        assert doc["lrci"] is None

    def test_tie_breaks_to_lowest_candidate(self) -> None:
        from gcm.grammar import ParseTree, _or_record, parse_document

        record = _or_record("object", np.array([0.5, 0.5, 0.0]), np.array([0, 1, -1]), np.array([1.0, 1.0, 0.0]))
        assert record.argmax == 0
        doc = parse_document(ParseTree("c", 0, or_nodes=[record]))
        assert doc["or_nodes"][0]["lambdas"] == [0.5, 0.5]
        assert doc["or_nodes"][0]["candidate_ids"] == [0, 1]

    def test_single_candidate(self) -> None:
        from gcm.grammar import _or_record

        record = _or_record("human", np.array([1.0, 0.0]), np.array([4, -1]), np.array([1.0, 0.0]))
        assert record.argmax == 4
        assert record.weights == [1.0]

    def test_all_masked_is_flagged(self) -> None:
        from gcm.grammar import _or_record

        record = _or_record("object", np.zeros(3), np.full(3, -1), np.zeros(3))
        assert record.all_masked
        assert record.argmax is None

    def test_nine_significant_digits(self) -> None:
        from gcm.grammar import ParseTree, parse_document

        doc = parse_document(ParseTree("c", 0, logits=[1 / 3]))
        assert doc["logits"] == [0.333333333]

    def test_classes_over_threshold(self, small_config, small_clips) -> None:
        from gcm.grammar import GcmParams, forward

        config = small_config.with_layers(("primitive", "concurrent"))
        result = forward(_leaves(config, small_clips), GcmParams(config))
        for tree in result.trees:
            expected = [config.class_names[c] for c, z in enumerate(tree.logits) if z >= 0.0]
            assert tree.classes_over_threshold == expected

    def test_lrci_argmax_time(self) -> None:
        from gcm.grammar import LrciRecord

        record = LrciRecord(timestamps=[3, 4, 6, 7], weights=[0.1, 0.0, 0.6, 0.3], available=[True, False, True, True])
        assert record.argmax_time == 6
        tied = LrciRecord(timestamps=[3, 4], weights=[0.5, 0.5], available=[True, True])
        assert tied.argmax_time == 3
        empty = LrciRecord(timestamps=[3, 4], weights=[0.0, 0.0], available=[False, False])
        assert empty.argmax_time is None
