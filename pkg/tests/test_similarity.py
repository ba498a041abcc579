import numpy as np
import pytest

from backends import cosine
from errors import ContractViolation, PairingError, ShapeError
from evaluation.harness import generate_eval_set
from evaluation.similarity import (SimilarityMatrix, common_indices, pairwise_mean_cosine, plot_similarity_heatmap,
                                   similarity_from_embeddings, similarity_matrix)
from generate_toy_dataset import generate_style_image

PROMPTS = ('painting', 'drawing', 'art')


def eval_set_for(style, model=None, n=8, base_seed=0, fail_at=()):
    pairs_seen = []

    def sample(prompt, seed):
        pairs_seen.append(seed)
        if len(pairs_seen) - 1 in fail_at:
            raise RuntimeError('sampler crashed')
        return generate_style_image(style, np.random.default_rng(seed), 16)

    return generate_eval_set(sample, model or style, PROMPTS, base_seed, n)


class ContentOnly:
    def embed_content(self, image):
        return np.ones(3)


def test_matrix_matches_brute_force(mock_backend):
    sets = [eval_set_for(style) for style in ('bright', 'stripes', 'checker')]
    for mode, embed in (('content', mock_backend.embed_content), ('style', mock_backend.embed_style)):
        matrix = similarity_matrix(sets, mock_backend, mode=mode, workers=2)
        assert matrix.models == ('bright', 'stripes', 'checker')
        for i, a in enumerate(sets):
            for j, b in enumerate(sets):
                expected = np.mean([cosine(embed(x.load_image()), embed(y.load_image()))
                                    for x, y in zip(a.items, b.items)])
                assert matrix.matrix[i, j] == pytest.approx(expected, abs=1e-9)
        np.testing.assert_allclose(np.diag(matrix.matrix), 1.0, atol=1e-9)
        np.testing.assert_array_equal(matrix.matrix, matrix.matrix.T)


def test_failed_indices_are_dropped_everywhere(mock_backend):
    a, b = eval_set_for('bright', fail_at=(1,)), eval_set_for('dark', fail_at=(4,))
    assert common_indices([a, b]) == [0, 2, 3, 5, 6, 7]
    matrix = similarity_matrix([a, b], mock_backend)
    kept = [0, 2, 3, 5, 6, 7]
    expected = np.mean([cosine(mock_backend.embed_content(a.items[i].load_image()),
                               mock_backend.embed_content(b.items[i].load_image())) for i in kept])
    assert matrix.value('bright', 'dark') == pytest.approx(expected, abs=1e-9)


def test_pairing_is_enforced(mock_backend):
    with pytest.raises(PairingError):
        similarity_matrix([eval_set_for('bright'), eval_set_for('dark', base_seed=1)], mock_backend)
    with pytest.raises(PairingError):
        similarity_matrix([eval_set_for('bright', model='m'), eval_set_for('dark', model='m')], mock_backend)


def test_embedder_must_declare_the_channel():
    sets = [eval_set_for('bright'), eval_set_for('dark')]
    assert similarity_matrix(sets, ContentOnly()).value('bright', 'dark') == pytest.approx(1.0)
    with pytest.raises(ContractViolation):
        similarity_matrix(sets, ContentOnly(), mode='style')


def test_similarity_from_embeddings(rng):
    embeddings = {name: rng.normal(size=(10, 4)) for name in 'abc'}
    matrix = similarity_from_embeddings(embeddings, 'style')
    assert matrix.mode == 'style'
    assert matrix.value('a', 'c') == pytest.approx(pairwise_mean_cosine(embeddings['a'], embeddings['c']))
    with pytest.raises(ShapeError):
        similarity_from_embeddings({'a': np.zeros((3, 4)), 'b': np.zeros((2, 4))})
    with pytest.raises(ShapeError):
        pairwise_mean_cosine(np.zeros(4), np.zeros(4))


def test_matrix_validation_and_csv(tmp_path):
    with pytest.raises(ContractViolation):
        SimilarityMatrix(('a', 'b'), np.array([[1.0, 0.2], [0.3, 1.0]]))
    with pytest.raises(ShapeError):
        SimilarityMatrix(('a',), np.eye(2))
    matrix = SimilarityMatrix(('a', 'b'), np.array([[1.0, 0.25], [0.25, 1.0]]), 'style')
    loaded = SimilarityMatrix.from_csv(matrix.to_csv(str(tmp_path / 'similarity_style.csv')), mode='style')
    assert loaded.models == ('a', 'b')
    np.testing.assert_array_equal(loaded.matrix, matrix.matrix)


def test_heatmap_is_written(tmp_path):
    matrix = SimilarityMatrix(('a', 'b'), np.array([[1.0, 0.25], [0.25, 1.0]]))
    path = plot_similarity_heatmap(matrix, str(tmp_path / 'similarity_content.png'))
    assert (tmp_path / 'similarity_content.png').stat().st_size > 0
    assert path.endswith('similarity_content.png')
