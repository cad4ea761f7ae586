import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import matchgraph as mg
from matchgraph.errors import InvalidRecord, NoTrainingData
from matchgraph.gcn import masked_loss, save_model
from matchgraph.subgraph import QesParams
from matchgraph.trainer import (
    OverlapRecord,
    OverlapStore,
    TrainConfig,
    build_training_set,
    init_adam,
    label_pair,
    label_qes,
    load_overlaps,
    optimizer_step,
    save_overlaps,
    train,
)


def small_scene(n=16, s=2, seed=3, dim=8, noise=0.05):
    return mg.generate_scene(
        mg.SceneConfig(n_images=n, symmetry_s=s, overlap_angle=math.pi / 6,
                       noise_sigma=noise, dim=dim, seed=seed)
    )


class TestOverlapRecord:
    def test_rejects_self_pair(self):
        with pytest.raises(InvalidRecord):
            OverlapRecord(3, 3, 0.5, 0.5)

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidRecord):
            OverlapRecord(1, 2, 1.5, 0.0)

    def test_symmetric_lookup(self):
        store = OverlapStore([OverlapRecord(4, 9, 0.7, 0.2)])
        assert store.get(9, 4).mo == 0.7
        assert store.get(4, 9).ct == 0.2
        assert store.get(4, 5) is None

    def test_conflicting_records_rejected(self):
        store = OverlapStore([OverlapRecord(1, 2, 0.5, 0.5)])
        store.add(OverlapRecord(2, 1, 0.5, 0.5))  # same values are fine
        with pytest.raises(InvalidRecord):
            store.add(OverlapRecord(2, 1, 0.6, 0.5))


class TestOverlapIO:
    def test_round_trip(self):
        store = OverlapStore(
            [OverlapRecord(5, 2, 0.25, 0.125), OverlapRecord(7, 9, 1.0, 0.0)]
        )
        assert load_overlaps(save_overlaps(store)) == store

    def test_symmetric_closure_on_load(self):
        store = load_overlaps("3 1 0.5 0.5\n")
        assert store.get(1, 3) is not None

    def test_bad_line(self):
        with pytest.raises(InvalidRecord):
            load_overlaps("1 2 0.5\n")

    def test_empty_text(self):
        assert len(load_overlaps("")) == 0


class TestLabelPair:
    def test_mo_boundary_inclusive(self):
        record = OverlapRecord(1, 2, 0.25, 0.0)
        assert label_pair(record, 0.25, 0.15) is True

    def test_both_zero(self):
        record = OverlapRecord(1, 2, 0.0, 0.0)
        assert label_pair(record, 0.25, 0.15) is False

    def test_ct_branch(self):
        record = OverlapRecord(1, 2, 0.1, 0.15)
        assert label_pair(record, 0.25, 0.15) is True

    @given(
        mo=st.floats(0, 1), ct=st.floats(0, 1),
        bump_mo=st.floats(0, 1), bump_ct=st.floats(0, 1),
        tau_mo=st.floats(0, 1), tau_ct=st.floats(0, 1),
    )
    def test_monotone_in_scores(self, mo, ct, bump_mo, bump_ct, tau_mo, tau_ct):
        low = label_pair(OverlapRecord(1, 2, mo, ct), tau_mo, tau_ct)
        high = label_pair(
            OverlapRecord(1, 2, min(1.0, mo + bump_mo), min(1.0, ct + bump_ct)),
            tau_mo,
            tau_ct,
        )
        assert high or not low


class TestLabelQes:
    def test_all_missing_records_label_false(self):
        scene = small_scene()
        index = mg.build_index(scene.embeddings)
        qes = mg.build_qes(index, scene.embeddings, 0, QesParams(4, 2, 3))
        labeled = label_qes(qes, OverlapStore(), TrainConfig())
        assert labeled.labels == tuple([False] * len(qes))

    def test_full_overlap_labels_true(self):
        scene = small_scene()
        index = mg.build_index(scene.embeddings)
        qes = mg.build_qes(index, scene.embeddings, 0, QesParams(4, 2, 3))
        store = OverlapStore([OverlapRecord(0, qes.nodes[0], 1.0, 1.0)])
        labeled = label_qes(qes, store, TrainConfig())
        assert labeled.labels[0] is True

    def test_labels_match_generator_truth(self):
        scene = small_scene(n=20, s=2)
        cfg = TrainConfig(qes_params=QesParams(5, 2, 3))
        index = mg.build_index(scene.embeddings)
        n, window = 20, math.pi / 6
        for q in (0, 7, 13):
            qes = label_qes(
                mg.build_qes(index, scene.embeddings, q, cfg.qes_params), scene.overlaps, cfg
            )
            for v, got in zip(qes.nodes, qes.labels):
                steps = min(abs(q - v), n - abs(q - v))
                circ = steps * 2 * math.pi / n
                if circ <= window:
                    mo = max(0.0, 1.0 - circ / window)
                    expected = mo >= cfg.tau_mo or mo >= cfg.tau_ct
                else:
                    expected = False
                assert got == expected


class TestOptimizerStep:
    def test_zero_gradient_leaves_params(self):
        params = [np.array([1.0, -2.0]), np.array([[3.0]])]
        grads = [np.zeros(2), np.zeros((1, 1))]
        state = init_adam(params)
        new_params, new_state = optimizer_step(params, grads, state)
        assert all(np.array_equal(a, b) for a, b in zip(params, new_params))
        assert new_state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        params = [np.array([0.0, 0.0, 0.0])]
        grads = [np.array([0.5, -3.0, 1e-3])]
        new_params, _ = optimizer_step(params, grads, init_adam(params), learning_rate=1e-2)
        step = new_params[0] - params[0]
        # bias-corrected first step is -lr * g / (|g| + eps)
        assert np.all(np.sign(step) == -np.sign(grads[0]))
        assert np.allclose(np.abs(step), 1e-2, rtol=1e-4)

    def test_constant_gradient_reaches_learning_rate_per_step(self):
        params = [np.array([0.0])]
        grads = [np.array([0.37])]
        state = init_adam(params)
        prev = params[0].copy()
        for t in range(400):
            params, state = optimizer_step(params, grads, state, learning_rate=1e-3)
            if t >= 398:
                delta = prev - params[0]
                prev = params[0].copy()
        assert np.allclose(delta, 1e-3, rtol=1e-2)

    def test_shape_mismatch(self):
        params = [np.zeros(3)]
        state = init_adam(params)
        from matchgraph.errors import DimensionError

        with pytest.raises(DimensionError):
            optimizer_step(params, [np.zeros(4)], state)


class TestTrain:
    def test_zero_epochs_returns_initialized_model(self):
        scene = small_scene()
        cfg = TrainConfig(qes_params=QesParams(4, 2, 3), epochs=0, seed=11)
        model, history = train(
            scene.embeddings, scene.overlaps, list(scene.embeddings.ids), cfg,
            conv_widths=(6, 6, 4, 4), fc_widths=(3,),
        )
        assert history == []
        reference = mg.init_model(8, conv_widths=(6, 6, 4, 4), fc_widths=(3,), seed=[11, 0])
        assert save_model(model) == save_model(reference)

    def test_loss_decreases_on_memorizable_instance(self):
        scene = small_scene(n=12, s=1, noise=0.02)
        cfg = TrainConfig(
            qes_params=QesParams(4, 2, 3), epochs=200, batch_size=1,
            learning_rate=1e-2, seed=5,
        )
        model, history = train(
            scene.embeddings, scene.overlaps, [0], cfg,
            conv_widths=(8, 8, 6, 6), fc_widths=(4,),
        )
        assert len(history) == 200
        assert history[-1].loss < history[0].loss

    def test_same_seed_gives_identical_checkpoints(self):
        scene = small_scene()
        cfg = TrainConfig(qes_params=QesParams(4, 2, 3), epochs=4, batch_size=4, seed=21)
        ids = list(scene.embeddings.ids)
        m1, h1 = train(scene.embeddings, scene.overlaps, ids, cfg,
                       conv_widths=(6, 6, 4, 4), fc_widths=(3,))
        m2, h2 = train(scene.embeddings, scene.overlaps, ids, cfg,
                       conv_widths=(6, 6, 4, 4), fc_widths=(3,))
        assert save_model(m1) == save_model(m2)
        assert h1 == h2

    def test_no_queries(self):
        scene = small_scene()
        with pytest.raises(NoTrainingData):
            train(scene.embeddings, scene.overlaps, [], TrainConfig())

    def test_history_length_matches_epochs(self):
        scene = small_scene()
        cfg = TrainConfig(qes_params=QesParams(4, 2, 3), epochs=3, seed=2)
        _, history = train(scene.embeddings, scene.overlaps, [0, 1, 2], cfg,
                           conv_widths=(6, 6, 4, 4), fc_widths=(3,))
        assert [h.epoch for h in history] == [1, 2, 3]


class TestHopTwoInfluence:
    def test_second_hop_labels_never_reach_loss(self):
        scene = small_scene()
        cfg = TrainConfig(qes_params=QesParams(4, 2, 3))
        subgraphs = build_training_set(
            scene.embeddings, scene.overlaps, list(scene.embeddings.ids), cfg
        )
        model = mg.init_model(8, conv_widths=(6, 6, 4, 4), fc_widths=(3,), seed=0)
        flipped_any = False
        for qes in subgraphs:
            probs = mg.model_forward(qes, model)
            base = masked_loss(probs, qes.labels, qes.hop)
            labels = list(qes.labels)
            for i, h in enumerate(qes.hop):
                if h == 2:
                    labels[i] = not labels[i]
                    flipped_any = True
            assert masked_loss(probs, labels, qes.hop) == base
        assert flipped_any
