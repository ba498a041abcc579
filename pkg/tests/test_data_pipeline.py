import os
import threading

import numpy as np
import pytest
from PIL import Image

from data_pipeline import (REFERENCE_MEDIUMS_REPORT, CaptionCache, DataConfig, ImageRecord, LabeledImageSet,
                           SubsetClassRow, SubsetReport, _repair_empty, build_mediums_subset, caption_dataset,
                           caption_matches, caption_tokens, fit_clusters, fit_text_clusters, kmeans_lloyd,
                           load_dataset, load_image_tensors)
from errors import ConfigError, ContractViolation, DatasetError
from utils.style_labels import MEDIUMS_STYLE_LABELS


class ColourCaptioner:
    """Red-dominant images are paintings, everything else a photo."""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def caption(self, image):
        with self._lock:
            self.calls += 1
        red, _, blue = np.asarray(image, dtype=np.float64).mean(axis=(0, 1))
        return 'a painting of flowers' if red > blue else 'a photo of a dog'


class BrokenCaptioner:
    def caption(self, image):
        raise RuntimeError('captioner offline')


class FlakyCaptioner:
    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def caption(self, image):
        self.calls += 1
        if self.calls <= self.failures:
            raise RuntimeError('timeout')
        return 'a drawing'


@pytest.fixture
def colour_root(tmp_path):
    root = tmp_path / 'colours'
    for label, colour, n in (('crimson', (200, 10, 10), 4), ('navy', (10, 10, 200), 3), ('rose', (180, 60, 90), 2)):
        os.makedirs(root / label)
        for i in range(n):
            Image.new('RGB', (8, 8), (colour[0], colour[1] + i, colour[2])).save(root / label / f"{i:02d}.png")
    return str(root)


def test_load_toy_dataset(toy_dataset_root):
    dataset = load_dataset(toy_dataset_root)
    assert len(dataset) == 30
    assert dataset.label_set == ('bright', 'checker', 'dark', 'gradient', 'stripes')
    assert dataset.name == 'toy'
    assert dataset.counts() == {label: 6 for label in dataset.label_set}
    assert [r.path for r in dataset.records] == sorted(r.path for r in dataset.records)
    assert list(dataset.label_indices()[:6]) == [0] * 6


def test_unreadable_and_foreign_files_are_skipped(toy_dataset_root):
    with open(os.path.join(toy_dataset_root, 'bright', '9999.png'), 'wb') as f:
        f.write(b'not an image')
    with open(os.path.join(toy_dataset_root, 'dark', 'notes.txt'), 'w') as f:
        f.write('provenance')
    assert len(load_dataset(toy_dataset_root)) == 30


def test_missing_or_empty_roots(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path / 'absent'))
    os.makedirs(tmp_path / 'empty' / 'cubism')
    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path / 'empty'))


def test_directory_names_are_canonicalized(tmp_path):
    for directory in ('Naive Art', 'Ukiyo_e'):
        os.makedirs(tmp_path / 'wiki' / directory)
        Image.new('RGB', (8, 8)).save(tmp_path / 'wiki' / directory / 'a.png')
    assert load_dataset(str(tmp_path / 'wiki')).label_set == ('na-ve-art-primitivism', 'ukiyo-e')


def test_labeled_set_validation():
    records = [ImageRecord('a.png', 'cubism')]
    with pytest.raises(DatasetError):
        LabeledImageSet(records, ('cubism', 'fauvism'), name='full')
    with pytest.raises(DatasetError):
        LabeledImageSet(records, ('fauvism', 'expressionism'))
    with pytest.raises(DatasetError):
        LabeledImageSet(records, ('cubism',), name='photos')
    subset = LabeledImageSet(records, ('fauvism', 'cubism')).subset(['cubism'], 'toy')
    assert subset.label_set == ('cubism',) and len(subset) == 1


@pytest.mark.parametrize('caption,expected', [
    ('two paintings of a harbour', True),
    ('A Drawing.', True),
    ('an artist at work', True),
    ('a photo of a dog', False),
    ('a smart phone', False),
    ('', False),
])
def test_caption_keyword_match(caption, expected):
    assert caption_matches(caption) is expected


def test_caption_tokens_drop_punctuation():
    assert caption_tokens('Oil, on canvas!') == ['oil', 'on', 'canvas']


def test_caption_cache_persists(tmp_path):
    path = str(tmp_path / 'captions.jsonl')
    cache = CaptionCache(path)
    cache.put('abc', 'a painting')
    cache.put('abc', 'a painting')
    reopened = CaptionCache(path)
    assert len(reopened) == 1 and 'abc' in reopened
    assert reopened.get('abc') == 'a painting'
    assert reopened.get('missing') is None


def test_default_cache_lives_under_cache_dir(tmp_path):
    assert CaptionCache().path == os.path.join(str(tmp_path / 'cache'), 'captions.jsonl')


def test_mediums_selection_by_caption_rate(colour_root, tmp_path):
    dataset = load_dataset(colour_root)
    cache = CaptionCache(str(tmp_path / 'captions.jsonl'))
    captioner = ColourCaptioner()
    subset, report = build_mediums_subset(dataset, captioner, top_n=2, cache=cache, workers=2)
    assert report.selected == ('crimson', 'rose')
    assert report.row('crimson').match_percent == 100.0
    assert report.row('navy') == SubsetClassRow('navy', 3, 0.0)
    assert [r.label for r in report.rows] == ['crimson', 'rose', 'navy']
    assert subset.label_set == ('crimson', 'rose') and len(subset) == 6
    assert subset.name == 'toy'
    assert all(r.caption == 'a painting of flowers' for r in subset.records)
    assert captioner.calls == 9

    again, cached_report = build_mediums_subset(dataset, BrokenCaptioner(), top_n=2, cache=CaptionCache(cache.path))
    assert cached_report.to_frame().equals(report.to_frame())
    assert len(again) == 6


def test_mediums_selection_bounds(colour_root):
    dataset = load_dataset(colour_root)
    for top_n in (0, 4):
        with pytest.raises(ContractViolation):
            build_mediums_subset(dataset, ColourCaptioner(), top_n=top_n)


def test_caption_retries(colour_root):
    dataset = load_dataset(colour_root).subset(['rose'], 'toy')
    flaky = FlakyCaptioner(failures=2)
    assert caption_dataset(dataset, flaky, workers=1, retries=2) == ['a drawing', 'a drawing']
    with pytest.raises(RuntimeError):
        caption_dataset(dataset, FlakyCaptioner(failures=1), workers=1, retries=0)


def test_subset_report_csv(tmp_path):
    path = REFERENCE_MEDIUMS_REPORT.to_csv(str(tmp_path / 'mediums_subset.csv'))
    loaded = SubsetReport.from_csv(path)
    assert loaded.row('expressionism') == SubsetClassRow('expressionism', 6054, 91.56)
    assert loaded.selected == MEDIUMS_STYLE_LABELS
    assert list(loaded.to_frame().columns) == ['style', 'quantity', 'percent', 'selected']
    with pytest.raises(ContractViolation):
        SubsetReport([SubsetClassRow('cubism', 3, 101.0)], ('cubism',))
    with pytest.raises(ContractViolation):
        SubsetReport([SubsetClassRow('cubism', -1, 50.0)], ('cubism',))


def test_reference_report_matches_mediums_labels():
    assert {r.label for r in REFERENCE_MEDIUMS_REPORT.rows} == set(MEDIUMS_STYLE_LABELS)
    assert all(r.match_percent > 89.0 for r in REFERENCE_MEDIUMS_REPORT.rows)


def test_kmeans_inertia_never_increases():
    for seed in range(100):
        points = np.random.default_rng(seed).normal(size=(50, 3))
        history = kmeans_lloyd(points, k=4, seed=seed).inertia_history
        assert all(b <= a + 1e-9 * history[0] for a, b in zip(history, history[1:])), seed


def test_kmeans_stops_at_a_fixed_point_under_loose_tol():
    for seed in range(300):
        points = np.random.default_rng(seed).normal(size=(60, 2))
        fit = kmeans_lloyd(points, k=4, seed=seed, tol=1e-2)
        d2 = ((points[:, None, :] - fit.centers[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(np.argmin(d2, axis=1), fit.assignment, err_msg=f"seed {seed}")
        expected = np.stack([points[fit.assignment == j].mean(axis=0) for j in range(4)])
        np.testing.assert_allclose(fit.centers, expected)


def test_kmeans_recovers_blobs(rng):
    truth = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    points = np.concatenate([c + 0.05 * rng.standard_normal((50, 2)) for c in truth])
    fit = kmeans_lloyd(points, k=3, seed=0)
    for center in truth:
        assert np.min(np.linalg.norm(fit.centers - center, axis=1)) < 0.2
    nearest = np.argmin(np.linalg.norm(fit.centers[:, None] - truth[None], axis=2), axis=1)
    np.testing.assert_array_equal(nearest[fit.assignment], np.repeat([0, 1, 2], 50))


def test_kmeans_with_one_cluster_per_point():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    fit = kmeans_lloyd(points, k=4)
    assert fit.inertia == 0.0
    assert sorted(fit.assignment.tolist()) == [0, 1, 2, 3]


def test_empty_clusters_are_repaired():
    d2 = np.array([[0.0, 9.0, 9.0], [4.0, 9.0, 9.0], [1.0, 9.0, 9.0], [9.0, 0.0, 9.0]])
    assignment = _repair_empty(np.array([0, 0, 0, 1]), d2, 3)
    assert np.all(np.bincount(assignment, minlength=3) > 0)
    assert assignment[1] == 2


@pytest.mark.parametrize('k,n', [(1, 5), (6, 5)])
def test_kmeans_bounds(k, n):
    with pytest.raises(ContractViolation):
        kmeans_lloyd(np.zeros((n, 2)) + np.arange(n)[:, None], k)
    with pytest.raises(ContractViolation):
        kmeans_lloyd(np.zeros((0, 2)), 2)


def test_fit_clusters_on_images(toy_dataset_root, mock_backend):
    dataset = load_dataset(toy_dataset_root)
    clusters = fit_clusters(dataset, mock_backend, k=5, seed=1, workers=2)
    assert (clusters.k, clusters.embed_dim, clusters.source, clusters.fit_seed) == (5, mock_backend.embed_dim, 'image', 1)
    again = fit_clusters(dataset, mock_backend, k=5, seed=1, workers=1)
    np.testing.assert_allclose(again.centers, clusters.centers)
    with pytest.raises(ConfigError):
        fit_clusters(dataset, None, k=5)


def test_fit_text_clusters(mock_backend):
    clusters = fit_text_clusters(MEDIUMS_STYLE_LABELS, mock_backend, k=3)
    assert clusters.k == 3 and clusters.source == 'text'
    with pytest.raises(ContractViolation):
        fit_text_clusters(MEDIUMS_STYLE_LABELS, mock_backend, k=11)


def test_image_tensors_for_adversarial_training(toy_dataset_root):
    dataset = load_dataset(toy_dataset_root)
    tensors = load_image_tensors(dataset, 16)
    assert tuple(tensors.images.shape) == (30, 3, 16, 16)
    assert float(tensors.images.min()) >= -1.0 and float(tensors.images.max()) <= 1.0
    assert tensors.labels.tolist() == dataset.label_indices().tolist()
    assert tensors.label_set == dataset.label_set


@pytest.mark.parametrize('kwargs', [{'name': 'photos'}, {'cluster_source': 'both'}, {'k': 1}, {'top_n': 0}])
def test_data_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DataConfig(**kwargs)
