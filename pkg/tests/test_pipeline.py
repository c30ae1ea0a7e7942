from __future__ import annotations

from functools import cache

import numpy as np
import pytest

from rankcav.cav import CavConfig, accuracy_table, learn_cavs, mean_accuracy
from rankcav.metrics import kendall_tau
from rankcav.nn import init_encoder
from rankcav.projection import project_embeddings
from rankcav.synth import (
    Concept,
    GroundTruthModel,
    Split,
    build_concept_sets,
    build_task_dataset,
    in_split,
    stratified_split,
)
from rankcav.tcav import Method, align_scenes, sensitivities, sensitivity_profile, tcav_score
from rankcav.training import EncoderTag, TrainConfig, embed, evaluate, latent_ordering, train_pipeline

pytestmark = pytest.mark.slow

SEEDS = range(5)


@cache
def dataset(seed: int):
    return stratified_split(build_task_dataset(2000, GroundTruthModel(), seed=seed), seed=seed)


@cache
def pipeline(seed: int, tag: EncoderTag = EncoderTag.RNC):
    return train_pipeline(dataset(seed), TrainConfig(seed=seed, log_every=200), tag)


@cache
def concept_sets(seed: int):
    return {str(name): scenes for name, scenes in build_concept_sets(200, seed=seed).items()}


@cache
def final_cavs(seed: int):
    encoder = pipeline(seed).encoder
    return learn_cavs(encoder, concept_sets(seed), [encoder.depth - 1], CavConfig(), seed=seed)


def untrained_encoder(seed: int):
    return init_encoder(pipeline(seed).encoder.widths, seed).freeze()


def test_pretraining_reduces_the_loss():
    losses = np.array(pipeline(0).pretrain_losses)
    assert losses[-30:].mean() < losses[:30].mean()


# =====================
# representation quality
# =====================


def test_rnc_embeddings_are_better_ordered_than_random():
    wins = 0
    for seed in SEEDS:
        test = in_split(dataset(seed), Split.TEST)
        wins += latent_ordering(pipeline(seed).encoder, test) > latent_ordering(untrained_encoder(seed), test)
    assert wins >= 4


@pytest.mark.parametrize("seed", SEEDS)
def test_frozen_encoder_head_matches_the_supervised_baseline(seed):
    rnc = evaluate(pipeline(seed), dataset(seed), Split.TEST)
    supervised = evaluate(pipeline(seed, EncoderTag.SUPERVISED), dataset(seed), Split.TEST)
    assert rnc.r2 >= 0.8
    assert rnc.kendall_tau >= 0.7
    assert rnc.r2 >= supervised.r2 - 0.05


@pytest.mark.parametrize("seed", SEEDS)
def test_first_principal_coordinate_follows_the_label(seed):
    test = in_split(dataset(seed), Split.TEST)
    ids, labels = [s.id for s in test], [s.target for s in test]

    def first_coordinate_tau(encoder) -> float:
        projections = project_embeddings(embed(encoder, test), ids, labels, "")
        return abs(kendall_tau([p.x for p in projections], labels))

    assert first_coordinate_tau(pipeline(seed).encoder) > first_coordinate_tau(untrained_encoder(seed))


# =====================
# concepts
# =====================


@pytest.mark.parametrize("seed", range(3))
def test_concepts_are_linearly_separable_after_pretraining(seed):
    layer = pipeline(seed).encoder.depth - 1
    trained = mean_accuracy(accuracy_table(final_cavs(seed)), layer)
    untrained_cavs = learn_cavs(untrained_encoder(seed), concept_sets(seed), [layer], CavConfig(), seed=seed)
    untrained = mean_accuracy(accuracy_table(untrained_cavs), layer)
    assert trained >= 0.90
    assert trained >= untrained


def test_vegetation_is_positive_and_impervious_surface_negative():
    hits = 0
    for seed in SEEDS:
        layer = pipeline(seed).encoder.depth - 1
        test = in_split(dataset(seed), Split.TEST)

        def score(concept: Concept) -> float:
            cav = final_cavs(seed)[concept.value, layer]
            return tcav_score(sensitivities(pipeline(seed), test, cav, Method.PLAIN)).score

        hits += score(Concept.VEGETATION) > 0.5 and score(Concept.IMPERVIOUS_SURFACE) < 0.5
    assert hits >= 4


def test_vegetation_ig_profile_rises_with_the_target():
    hits = 0
    for seed in SEEDS:
        layer = pipeline(seed).encoder.depth - 1
        test = in_split(dataset(seed), Split.TEST)
        cav = final_cavs(seed)[Concept.VEGETATION.value, layer]
        rows = sensitivity_profile(pipeline(seed), test, cav, Method.IG)
        assert sum(row.count for row in rows) == len(test)
        # IG varies per scene, so the bins are not trivially equal
        assert len({round(row.mean, 12) for row in rows}) > 1
        hits += rows[-1].mean >= rows[0].mean
    assert hits >= 4


def test_vegetation_aligned_scenes_score_higher():
    hits = 0
    for seed in SEEDS:
        layer = pipeline(seed).encoder.depth - 1
        cavs = [final_cavs(seed)[concept.value, layer] for concept in Concept]
        aligned = align_scenes(pipeline(seed), in_split(dataset(seed), Split.TEST), cavs)
        vegetation = [r.label for r in aligned if r.best == Concept.VEGETATION.value]
        impervious = [r.label for r in aligned if r.best == Concept.IMPERVIOUS_SURFACE.value]
        hits += bool(vegetation and impervious) and np.mean(vegetation) > np.mean(impervious)
    assert hits >= 4
