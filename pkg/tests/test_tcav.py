from __future__ import annotations

import numpy as np
import pytest

from rankcav.cav import Cav
from rankcav.exceptions import ConfigError, ShapeError, UndefinedMetricError
from rankcav.nn import (
    Activation,
    Layer,
    LinearHead,
    MlpEncoder,
    forward,
    forward_from,
    head_output,
    head_outputs,
    init_encoder,
)
from rankcav.synth import GroundTruthModel, build_task_dataset
from rankcav.tcav import (
    IgConfig,
    Method,
    SensitivityRecord,
    TcavScore,
    align_instances,
    align_scenes,
    group_records,
    integrated_gradients,
    integrated_gradients_layer,
    label_bins,
    mean_tcav_score,
    normalize_magnitudes,
    normalize_values,
    profile_records,
    sensitivities,
    sensitivity_ig,
    sensitivity_plain,
    sensitivity_profile,
    tcav_score,
)
from rankcav.training import EncoderTag, TrainConfig, TrainedPipeline


def pipeline_of(encoder: MlpEncoder, head: LinearHead) -> TrainedPipeline:
    return TrainedPipeline(encoder.freeze(), head, EncoderTag.RNC, TrainConfig(encoder_widths=encoder.widths[1:]))


def random_pipeline(seed: int, widths=(48, 10, 6, 4)) -> TrainedPipeline:
    rng = np.random.default_rng(seed)
    encoder = init_encoder(widths, seed)
    encoder = MlpEncoder(
        tuple(Layer(layer.weights, rng.normal(0, 0.2, layer.out_dim), layer.activation) for layer in encoder.layers)
    )
    return pipeline_of(encoder, LinearHead(rng.normal(size=widths[-1]), float(rng.normal())))


def cav_at(layer: int, direction, concept: str = "Vegetation") -> Cav:
    return Cav(concept, layer, np.asarray(direction, dtype=float), 0.0, 1.0)


def unit(rng: np.random.Generator, size: int) -> np.ndarray:
    v = rng.normal(size=size)
    return v / np.linalg.norm(v)


def records(values, concept: str = "Water", labels=None) -> list[SensitivityRecord]:
    labels = range(len(values)) if labels is None else labels
    return [
        SensitivityRecord(f"s{i}", concept, 0, Method.PLAIN, float(v), float(y))
        for i, (v, y) in enumerate(zip(values, labels))
    ]


@pytest.fixture(scope="module")
def scenes():
    return build_task_dataset(100, GroundTruthModel(), seed=0, grid_size=4)


# =====================
# plain sensitivities
# =====================


def test_linear_case_is_head_dot_cav(scenes):
    rng = np.random.default_rng(0)
    encoder = MlpEncoder(
        (
            Layer(rng.normal(size=(4, 48)), np.zeros(4), Activation.RELU),
            Layer(np.eye(4), np.zeros(4), Activation.IDENTITY),
        )
    )
    head = LinearHead(rng.normal(size=4), 0.3)
    v = unit(rng, 4)
    record = sensitivity_plain(pipeline_of(encoder, head), scenes[0], cav_at(0, v))
    assert record.value == pytest.approx(float(head.weights @ v), abs=1e-12)
    assert record.method is Method.PLAIN
    assert record.label == scenes[0].target


def test_orthogonal_cav_gives_zero(scenes):
    rng = np.random.default_rng(1)
    encoder = init_encoder((48, 4), seed=1)
    head = LinearHead(np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
    v = np.array([0.0, 0.6, 0.8, 0.0])
    scene = scenes[int(rng.integers(100))]
    assert abs(sensitivity_plain(pipeline_of(encoder, head), scene, cav_at(0, v)).value) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_plain_matches_directional_difference(seed, scenes):
    pipeline = random_pipeline(seed)
    rng = np.random.default_rng(50 + seed)
    layer = seed % 3
    scene = scenes[seed]
    v = unit(rng, pipeline.encoder.layers[layer].out_dim)
    a = forward(pipeline.encoder, scene.features[None, :]).activations[layer][0]
    eps = 1e-6

    def h(point):
        return head_output(pipeline.head, forward_from(pipeline.encoder, point[None, :], layer).embedding[0])

    numeric = (h(a + eps * v) - h(a)) / eps
    value = sensitivity_plain(pipeline, scene, cav_at(layer, v)).value
    assert abs(value - numeric) <= 1e-4 * max(abs(value), abs(numeric), 1e-2)


def test_cav_layer_is_checked(scenes):
    pipeline = random_pipeline(0)
    with pytest.raises(ShapeError):
        sensitivity_plain(pipeline, scenes[0], cav_at(3, np.ones(4) / 2))
    with pytest.raises(ShapeError):
        sensitivity_plain(pipeline, scenes[0], cav_at(0, np.ones(4) / 2))


def test_records_follow_scene_order(scenes):
    pipeline = random_pipeline(2)
    v = unit(np.random.default_rng(2), 6)
    batch = sensitivities(pipeline, scenes[:7], cav_at(1, v))
    assert [r.scene_id for r in batch] == [s.id for s in scenes[:7]]
    singles = [sensitivity_plain(pipeline, s, cav_at(1, v)).value for s in scenes[:7]]
    assert np.allclose([r.value for r in batch], singles, rtol=1e-12, atol=1e-14)
    assert sensitivities(pipeline, [], cav_at(1, v)) == []


# =====================
# integrated gradients
# =====================


def test_ig_at_last_layer_is_displacement_times_head(scenes):
    pipeline = random_pipeline(3)
    layer = pipeline.encoder.depth - 1
    scene = scenes[3]
    a = forward(pipeline.encoder, scene.features[None, :]).activations[layer][0]
    baseline = forward(pipeline.encoder, np.zeros((1, 48))).activations[layer][0]
    attribution = integrated_gradients_layer(pipeline, scene, layer)
    assert np.allclose(attribution, (a - baseline) * pipeline.head.weights, atol=1e-12)
    expected = head_output(pipeline.head, a) - head_output(pipeline.head, baseline)
    assert attribution.sum() == pytest.approx(expected, abs=1e-10)


def test_ig_linear_closed_form(scenes):
    rng = np.random.default_rng(4)
    encoder = MlpEncoder(
        (
            Layer(rng.normal(size=(5, 48)), np.zeros(5), Activation.IDENTITY),
            Layer(rng.normal(size=(3, 5)), np.zeros(3), Activation.IDENTITY),
        )
    )
    head = LinearHead(rng.normal(size=3), 0.0)
    v = unit(rng, 3)
    scene = scenes[4]
    a = forward(encoder, scene.features[None, :]).embedding[0]
    record = sensitivity_ig(pipeline_of(encoder, head), scene, cav_at(1, v))
    assert record.method is Method.IG
    assert record.value == pytest.approx(float((a * head.weights) @ v), abs=1e-10)


def test_ig_of_the_baseline_is_zero():
    pipeline = random_pipeline(5)
    for layer in range(3):
        attribution = integrated_gradients(pipeline, np.zeros((2, 48)), layer)
        assert np.array_equal(attribution, np.zeros((2, (10, 6, 4)[layer])))


def test_ig_completeness_in_positive_region():
    rng = np.random.default_rng(6)
    weights = [rng.uniform(0.1, 1.0, size=(5, 8)), rng.uniform(0.1, 1.0, size=(3, 5))]
    encoder = MlpEncoder(
        tuple(Layer(w, rng.uniform(0.1, 0.5, w.shape[0]), Activation.RELU) for w in weights)
    )
    pipeline = pipeline_of(encoder, LinearHead(rng.normal(size=3), 0.0))
    x = rng.uniform(0.2, 1.0, size=(1, 8))
    total = integrated_gradients(pipeline, x, 0, IgConfig(steps=2)).sum()
    a = forward(encoder, x).activations[0]
    baseline = forward(encoder, np.zeros((1, 8))).activations[0]
    expected = head_output(pipeline.head, forward_from(encoder, a, 0).embedding[0]) - head_output(
        pipeline.head, forward_from(encoder, baseline, 0).embedding[0]
    )
    assert total == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_ig_completeness_on_relu_network(seed, scenes):
    pipeline = random_pipeline(seed)
    encoder = pipeline.encoder
    for scene in scenes[:5]:
        a = forward(encoder, scene.features[None, :]).activations[0]
        baseline = forward(encoder, np.zeros((1, 48))).activations[0]
        delta = head_output(pipeline.head, forward_from(encoder, a, 0).embedding[0]) - head_output(
            pipeline.head, forward_from(encoder, baseline, 0).embedding[0]
        )
        total = integrated_gradients(pipeline, scene.features[None, :], 0, IgConfig(steps=4000)).sum()
        assert abs(total - delta) <= 1e-3 * max(abs(delta), 0.1) + 1e-9


def test_ig_completeness_error_shrinks_as_steps_double(scenes):
    batch = np.stack([scene.features for scene in scenes[:20]])
    errors = []
    for steps in (16, 32, 64, 128, 256):
        total = 0.0
        for seed in range(5):
            pipeline = random_pipeline(seed)
            encoder = pipeline.encoder
            a = forward(encoder, batch).activations[0]
            baseline = forward(encoder, np.zeros((1, 48))).activations[0]
            delta = head_outputs(pipeline.head, forward_from(encoder, a, 0).embedding) - head_outputs(
                pipeline.head, forward_from(encoder, baseline, 0).embedding
            )
            attributions = integrated_gradients(pipeline, batch, 0, IgConfig(steps=steps))
            total += float(np.sum(np.abs(attributions.sum(axis=1) - delta)))
        errors.append(total)
    assert errors[0] > 1e-6
    assert all(finer <= coarser + 1e-9 for coarser, finer in zip(errors, errors[1:]))
    assert errors[-1] < 0.5 * errors[0]


def test_ig_step_counts_agree(scenes):
    pipeline = random_pipeline(7)
    v = unit(np.random.default_rng(7), 10)
    coarse = [r.value for r in sensitivities(pipeline, scenes[:20], cav_at(0, v), Method.IG, IgConfig(steps=50))]
    fine = [r.value for r in sensitivities(pipeline, scenes[:20], cav_at(0, v), Method.IG, IgConfig(steps=500))]
    assert np.linalg.norm(np.subtract(coarse, fine)) <= 0.01 * np.linalg.norm(fine)


def test_ig_config_validation():
    with pytest.raises(ConfigError):
        IgConfig(steps=1)
    with pytest.raises(ConfigError):
        IgConfig(baseline="blur")


# =====================
# TCAV scores
# =====================


@pytest.mark.parametrize(
    "values, expected",
    [
        ((0.2, 0.5, 1.1), 1.0),
        ((0.2, -0.1, 0.3), 2 / 3),
        ((0.0, 0.0, 1.0), 1 / 3),
    ],
)
def test_tcav_score_examples(values, expected):
    score = tcav_score(records(values))
    assert score.score == pytest.approx(expected, abs=1e-15)
    assert score.positive == round(expected * 3)
    assert score.n == 3


def test_tcav_score_needs_records():
    with pytest.raises(UndefinedMetricError):
        tcav_score([])


def test_tcav_score_rejects_mixed_groups():
    with pytest.raises(ShapeError):
        tcav_score(records((1.0,), "Water") + records((1.0,), "Vegetation"))


def test_group_records_and_mean_score():
    grouped = group_records(records((1.0, -1.0), "Water") + records((1.0,), "Vegetation"))
    assert {key[0]: len(value) for key, value in grouped.items()} == {"Water": 2, "Vegetation": 1}
    mean = mean_tcav_score([TcavScore("Water", 0, "plain", 1, 4), TcavScore("Water", 0, "plain", 3, 4)])
    assert mean.mean == 0.5
    assert mean.std == 0.25
    assert mean.runs == 2


def test_scaled_cav_scales_sensitivities_only(scenes):
    pipeline = random_pipeline(8)
    v = unit(np.random.default_rng(8), 6)
    base = sensitivities(pipeline, scenes[:30], cav_at(1, v))
    scaled = sensitivities(pipeline, scenes[:30], cav_at(1, 3.0 * v))
    assert np.allclose([r.value * 3.0 for r in base], [r.value for r in scaled], rtol=1e-12, atol=1e-14)
    assert tcav_score(base).positive == tcav_score(scaled).positive


# =====================
# normalisation
# =====================


@pytest.mark.parametrize(
    "values, expected",
    [
        ((-4.0, -1.0, 2.0, 8.0), (-1.0, 0.0, 0.0, 1.0)),
        ((1.0, 2.0, 3.0), (0.0, 0.5, 1.0)),
        ((7.0,), (1.0,)),
        ((-3.0, 0.0, 5.0), (-1.0, 0.0, 1.0)),
    ],
)
def test_normalize_examples(values, expected):
    assert np.allclose(normalize_values(values), expected, atol=1e-15)


def test_normalize_keeps_sign_and_order():
    values = np.random.default_rng(9).normal(size=200)
    normalized = normalize_values(values)
    assert np.all(normalized[values < 0] <= 0) and np.all(normalized[values > 0] >= 0)
    for sign in (values < 0, values > 0):
        order = np.argsort(values[sign])
        assert np.all(np.diff(normalized[sign][order]) >= 0)
    assert normalized.min() == -1.0 and normalized.max() == 1.0


def test_normalize_magnitudes_fills_records():
    normalized = normalize_magnitudes(records((-2.0, 4.0)))
    assert [r.normalized for r in normalized] == [-1.0, 1.0]
    assert [r.value for r in normalized] == [-2.0, 4.0]


# =====================
# alignment
# =====================


def test_single_concept_wins_everywhere():
    embeddings = np.random.default_rng(10).normal(size=(6, 3))
    aligned = align_instances(embeddings, [cav_at(0, [1.0, 0.0, 0.0], "Water")])
    assert {record.best for record in aligned} == {"Water"}


def test_orthogonal_directions_align_to_themselves():
    cavs = [cav_at(0, [1.0, 0.0], "Water"), cav_at(0, [0.0, 1.0], "Vegetation")]
    aligned = align_instances(np.array([[1.0, 0.0], [0.0, 1.0]]), cavs, ["a", "b"], [0.1, 0.9])
    assert [r.best for r in aligned] == ["Water", "Vegetation"]
    assert aligned[0].cosines == (1.0, 0.0)
    assert aligned[1].label == 0.9


def test_ties_go_to_the_first_concept():
    cavs = [cav_at(0, [1.0, 0.0], "Water"), cav_at(0, [1.0, 0.0], "Vegetation")]
    assert align_instances(np.array([[2.0, 1.0]]), cavs)[0].best == "Water"


def test_alignment_uses_normalised_columns():
    cavs = [cav_at(0, [1.0, 0.0], "Water"), cav_at(0, [0.0, 1.0], "Vegetation")]
    embeddings = np.array([[1.0, 0.1], [1.0, 0.2], [1.0, 0.8]])
    aligned = align_instances(embeddings, cavs)
    cosines = np.array([r.cosines for r in aligned])
    normalized = cosines / np.linalg.norm(cosines, axis=0)
    assert np.allclose([r.normalized for r in aligned], normalized)
    assert [r.best for r in aligned] == [["Water", "Vegetation"][i] for i in np.argmax(normalized, axis=1)]
    # raw cosines favour Water on the last row, the scaled columns do not
    assert cosines[2, 0] > cosines[2, 1]
    assert aligned[2].best == "Vegetation"


def test_zero_embedding_only_loses_its_own_alignment():
    cavs = [cav_at(0, [1.0, 0.0], "Water"), cav_at(0, [0.0, 1.0], "Vegetation")]
    embeddings = np.array([[1.0, 0.1], [0.0, 0.0], [0.2, 1.0]])
    aligned = align_instances(embeddings, cavs, ["a", "zero", "c"])
    assert aligned[1].best is None
    assert np.isnan(aligned[1].cosines).all() and np.isnan(aligned[1].normalized).all()
    assert [aligned[0].best, aligned[2].best] == ["Water", "Vegetation"]
    others = align_instances(embeddings[[0, 2]], cavs, ["a", "c"])
    assert [r.normalized for r in others] == [aligned[0].normalized, aligned[2].normalized]


def test_alignment_is_invariant_to_rescaling():
    rng = np.random.default_rng(11)
    embeddings = rng.normal(size=(20, 4))
    cavs = [cav_at(0, unit(rng, 4), name) for name in ("Water", "Vegetation", "Agriculture")]
    base = [r.best for r in align_instances(embeddings, cavs)]
    assert [r.best for r in align_instances(embeddings * rng.uniform(0.1, 10, size=(20, 1)), cavs)] == base
    scaled_cavs = [cav_at(0, 2.5 * cav.direction, cav.concept) for cav in cavs]
    assert [r.best for r in align_instances(embeddings, scaled_cavs)] == base


def test_alignment_errors():
    cavs = [cav_at(0, [1.0, 0.0])]
    with pytest.raises(UndefinedMetricError):
        align_instances(np.array([[1.0, 1.0], [0.0, 0.0]]), cavs)
    with pytest.raises(ShapeError):
        align_instances(np.ones((2, 3)), cavs)
    with pytest.raises(ShapeError):
        align_instances(np.ones((2, 2)), [cav_at(0, [1.0, 0.0]), cav_at(1, [0.0, 1.0])])
    with pytest.raises(ShapeError):
        align_instances(np.ones((2, 2)), [])


def test_align_scenes_uses_cav_layer(scenes):
    pipeline = random_pipeline(12)
    rng = np.random.default_rng(12)
    cavs = [cav_at(2, unit(rng, 4), name) for name in ("Water", "Vegetation")]
    aligned = align_scenes(pipeline, scenes[:10], cavs)
    expected = align_instances(forward(pipeline.encoder, np.stack([s.features for s in scenes[:10]])).embedding, cavs)
    assert [r.best for r in aligned] == [r.best for r in expected]
    assert [r.scene_id for r in aligned] == [s.id for s in scenes[:10]]


# =====================
# profiles
# =====================


def test_label_bins_partition():
    edges, assignment = label_bins(np.arange(10.0), 5)
    assert edges[0] == 0.0 and edges[-1] == 9.0
    assert np.bincount(assignment, minlength=5).tolist() == [2, 2, 2, 2, 2]


def test_profile_counts_sum_to_n():
    rng = np.random.default_rng(13)
    rows = profile_records(records(rng.normal(size=1000), labels=rng.uniform(size=1000)), bins=5)
    assert len(rows) == 5
    assert sum(row.count for row in rows) == 1000
    assert all(row.count == 200 for row in rows)
    assert all(-1.0 <= row.mean <= 1.0 for row in rows)


def test_constant_sensitivities_give_equal_means():
    rows = profile_records(records(np.full(50, 0.3), labels=np.linspace(0, 1, 50)), bins=5)
    assert {row.mean for row in rows} == {1.0}


def test_empty_bins_are_reported():
    rows = profile_records(records(np.ones(10), labels=np.ones(10)), bins=5)
    assert [row.count for row in rows] == [0, 0, 0, 0, 10]
    assert np.isnan(rows[0].mean)


def test_profile_needs_two_bins():
    with pytest.raises(ConfigError):
        profile_records(records((1.0, 2.0)), bins=1)


def test_sensitivity_profile_on_pipeline(scenes):
    pipeline = random_pipeline(14)
    v = unit(np.random.default_rng(14), 6)
    rows = sensitivity_profile(pipeline, scenes, cav_at(1, v), Method.PLAIN, bins=4)
    assert [row.bin for row in rows] == [0, 1, 2, 3]
    assert sum(row.count for row in rows) == len(scenes)
