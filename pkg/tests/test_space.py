import numpy as np
import pytest

from errors import ContractViolation
from evaluation.harness import generate_eval_set
from evaluation.space import (PossibilitySpace, pairwise_spaces, pca_stage, plot_possibility_space,
                              possibility_space, project_embeddings, space_from_embeddings)
from generate_toy_dataset import generate_style_image

PROMPTS = ('painting', 'drawing', 'art')


def eval_set_for(style, n=12):
    return generate_eval_set(lambda prompt, seed: generate_style_image(style, np.random.default_rng(seed), 16),
                             style, PROMPTS, 0, n)


def two_clusters(rng, n=20, dim=10):
    points = np.concatenate([rng.normal(0.0, 0.1, size=(n, dim)), rng.normal(10.0, 0.1, size=(n, dim))])
    return points, ['a'] * n + ['b'] * n


def test_needs_three_points():
    with pytest.raises(ContractViolation):
        project_embeddings(np.zeros((2, 4)))


def test_separated_models_stay_separated(rng):
    points, tags = two_clusters(rng)
    space = space_from_embeddings(points, tags, pca_dim=5, seed=0)
    assert space.coords.shape == (40, 2)
    assert space.silhouette() > 0.5
    frame = space.to_frame()
    assert list(frame.columns) == ['model', 'index', 'x', 'y']
    assert frame['index'].tolist() == list(range(40))


def test_projection_is_seeded(rng):
    points, _ = two_clusters(rng, n=8)
    np.testing.assert_allclose(project_embeddings(points, seed=3), project_embeddings(points, seed=3))


def test_duplicate_embeddings_stay_finite(rng):
    points = np.concatenate([np.tile(rng.normal(size=(1, 6)), (5, 1)), rng.normal(size=(5, 6))])
    coords = project_embeddings(points, pca_dim=4, seed=0)
    assert coords.shape == (10, 2)
    assert np.all(np.isfinite(coords))


def test_pca_stage_dimensions(rng):
    reduced, pca = pca_stage(rng.normal(size=(10, 5)), 50)
    assert reduced.shape == (10, 5)
    rank_one = np.outer(np.arange(10.0), rng.normal(size=6))
    reduced, _ = pca_stage(rank_one, 50)
    assert reduced.shape == (10, 2)
    reduced, _ = pca_stage(rng.normal(size=(30, 8)), 3)
    assert reduced.shape == (30, 3)


def test_silhouette_needs_two_models():
    space = PossibilitySpace(np.zeros((3, 2)), ('a', 'a', 'a'), (0, 1, 2))
    with pytest.raises(ContractViolation):
        space.silhouette()


def test_space_over_eval_sets(mock_backend, tmp_path):
    sets = [eval_set_for(style) for style in ('bright', 'dark', 'checker')]
    space = possibility_space(sets[:2], mock_backend, pca_dim=8, perplexity=5.0)
    assert space.coords.shape == (24, 2)
    assert space.tags.count('bright') == 12
    assert space.indices[:12] == tuple(range(12))
    plot_possibility_space(space, str(tmp_path / 'space.png'))
    assert (tmp_path / 'space.png').exists()

    spaces = pairwise_spaces(sets, mock_backend, pca_dim=8, perplexity=5.0)
    assert set(spaces) == {('bright', 'dark'), ('bright', 'checker'), ('dark', 'checker')}
    with pytest.raises(ContractViolation):
        possibility_space(sets[:1], mock_backend)
