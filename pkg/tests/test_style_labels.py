import pytest

from utils.style_labels import (EXPECTED_SIZES, FULL_STYLE_LABELS, MEDIUMS_STYLE_LABELS, StyleLabelRegistry,
                                get_default_style_labels, read_label_file, write_label_file)


def test_label_sets():
    assert len(FULL_STYLE_LABELS) == EXPECTED_SIZES['full'] == 27
    assert len(MEDIUMS_STYLE_LABELS) == EXPECTED_SIZES['mediums'] == 10
    assert set(MEDIUMS_STYLE_LABELS) <= set(FULL_STYLE_LABELS)
    assert len(set(FULL_STYLE_LABELS)) == 27


@pytest.mark.parametrize('raw,canonical', [
    ('Naive Art', 'na-ve-art-primitivism'),
    ('Ukiyo_e', 'ukiyo-e'),
    ('Abstract Expressionism', 'abstract-expressionism'),
    ('  Cubism ', 'cubism'),
])
def test_canonicalize(raw, canonical):
    assert get_default_style_labels().canonicalize(raw) == canonical


def test_canonicalize_blank():
    assert get_default_style_labels().canonicalize('  ') is None


def test_registry_lookup_and_register():
    registry = StyleLabelRegistry()
    assert registry.get('mediums') == MEDIUMS_STYLE_LABELS
    registry.register('toy', ('bright', 'dark'))
    assert registry.names() == ['full', 'mediums', 'toy']
    with pytest.raises(KeyError):
        registry.get('photos')


def test_label_file_round_trip(tmp_path):
    path = write_label_file(str(tmp_path / 'labels' / 'mediums.txt'), MEDIUMS_STYLE_LABELS)
    assert read_label_file(path) == MEDIUMS_STYLE_LABELS
