import numpy as np

from evaluation.harness import MetricSummary, ScoreTable
from evaluation.report import build_report, score_quartiles
from evaluation.similarity import SimilarityMatrix
from evaluation.space import PossibilitySpace


def sample_table():
    values = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    return ScoreTable(summaries={'ddpo': {'aesthetic': MetricSummary(float(values.mean()), float(values.std()), 5)}},
                      values={'ddpo': {'aesthetic': values}})


def test_quartiles_flag_outliers():
    row = score_quartiles(sample_table()).iloc[0]
    assert (row['model'], row['metric'], row['n']) == ('ddpo', 'aesthetic', 5)
    assert (row['q1'], row['median'], row['q3']) == (2.0, 3.0, 4.0)
    assert row['whisker_high'] == 4.0 and row['whisker_low'] == 1.0
    assert row['outliers'] == 1
    assert row['max'] == 100.0


def test_report_writes_every_artifact(tmp_path, rng):
    matrix = SimilarityMatrix(('ddpo', 'base'), np.array([[1.0, 0.4], [0.4, 1.0]]), 'content')
    coords = np.concatenate([rng.normal(size=(5, 2)), rng.normal(5.0, 1.0, size=(5, 2))])
    space = PossibilitySpace(coords, ('ddpo',) * 5 + ('base',) * 5, tuple(range(5)) * 2)
    path = build_report(str(tmp_path), sample_table(), [matrix], {'ddpo_vs_base': space}, config_hash='abcdef012345')

    for name in ('scores.csv', 'scores_formatted.csv', 'score_values.csv', 'score_quartiles.csv', 'box_aesthetic.png',
                 'similarity_content.csv', 'similarity_content.png', 'space_ddpo_vs_base.csv',
                 'space_ddpo_vs_base.png', 'report.md'):
        assert (tmp_path / name).exists(), name
    text = open(path).read()
    assert '## Scores' in text
    assert sample_table().cell('ddpo', 'aesthetic') in text
    assert '## Content similarity' in text
    assert 'abcdef012345' in text
    assert '| ddpo_vs_base |' in text


def test_report_tables_are_valid_markdown(tmp_path):
    matrix = SimilarityMatrix(('ddpo', 'base'), np.array([[1.0, 0.4], [0.4, 1.0]]), 'style')
    text = open(build_report(str(tmp_path), sample_table(), [matrix])).read()
    table = [line for line in text.splitlines() if line.startswith('|')]
    header, rule, *rows = table[:3]
    assert header.split('|')[1].strip() == 'model'
    assert set(rule.replace('|', '').strip()) <= {'-', ':'}
    assert len(rows) == 1 and sample_table().cell('ddpo', 'aesthetic') in rows[0]

    similarity_rows = [line for line in table if line.split('|')[1].strip() in ('ddpo', 'base')][1:]
    assert [line.split('|')[1].strip() for line in similarity_rows] == ['ddpo', 'base']
    assert similarity_rows[0].split('|')[2].strip() == '1.000'
    assert similarity_rows[0].split('|')[3].strip() == '0.400'
    assert all(line.count('|') == header.count('|') for line in table[:3])


def test_empty_report(tmp_path):
    text = open(build_report(str(tmp_path))).read()
    assert text.startswith('# Evaluation report')
    assert not (tmp_path / 'scores.csv').exists()
