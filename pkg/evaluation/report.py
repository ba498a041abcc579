import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from evaluation.harness import ScoreTable
from evaluation.similarity import SimilarityMatrix, plot_similarity_heatmap
from evaluation.space import PossibilitySpace, plot_possibility_space

logger = logging.getLogger(__name__)


def score_quartiles(table: ScoreTable) -> pd.DataFrame:
    """Box-plot statistics per (model, metric): whisker ends at 1.5 IQR, like matplotlib draws them."""
    rows = []
    for model, per_model in table.values.items():
        for metric, values in per_model.items():
            values = np.asarray(values, dtype=np.float64)
            if values.size == 0:
                continue
            q1, median, q3 = np.percentile(values, [25, 50, 75])
            iqr = q3 - q1
            inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
            rows.append({
                'model': model, 'metric': metric, 'n': int(values.size),
                'min': float(values.min()), 'q1': float(q1), 'median': float(median), 'q3': float(q3),
                'max': float(values.max()),
                'whisker_low': float(inside.min()), 'whisker_high': float(inside.max()),
                'outliers': int(values.size - inside.size),
            })
    return pd.DataFrame(rows, columns=['model', 'metric', 'n', 'min', 'q1', 'median', 'q3', 'max',
                                       'whisker_low', 'whisker_high', 'outliers'])


def plot_score_boxes(table: ScoreTable, metric: str, path: str) -> Optional[str]:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    df = table.values_frame()
    df = df[df['metric'] == metric]
    if df.empty:
        logger.warning(f"No values to plot for {metric}")
        return None
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * df['model'].nunique() + 2.0), 4.5))
    sns.boxplot(data=df, x='model', y='value', ax=ax)
    ax.set_title(metric.replace('_', ' ').title())
    ax.set_xlabel('')
    ax.tick_params(axis='x', rotation=45)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _markdown_table(df: pd.DataFrame) -> List[str]:
    return df.to_markdown(index=False, floatfmt='.3f').splitlines()


def build_report(out_dir: str, scores: Optional[ScoreTable] = None,
                 similarities: Sequence[SimilarityMatrix] = (),
                 spaces: Optional[Dict[str, PossibilitySpace]] = None, config_hash: str = '') -> str:
    """Write CSVs, PNGs and report.md; every number in the report comes from the files next to it."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ['# Evaluation report', '']
    if config_hash:
        lines += [f"Config hash: `{config_hash}`", '']

    if scores is not None and scores.summaries:
        scores.to_csv(out_dir)
        quartiles = score_quartiles(scores)
        quartiles.to_csv(os.path.join(out_dir, 'score_quartiles.csv'), index=False)
        lines += ['## Scores', '', 'Each cell is mean ( std ) over the eval set.', '']
        lines += _markdown_table(scores.formatted_frame())
        lines.append('')
        for metric in scores.metrics:
            png = plot_score_boxes(scores, metric, os.path.join(out_dir, f"box_{metric}.png"))
            if png:
                lines += [f"![{metric}]({os.path.basename(png)})", '']

    for matrix in similarities:
        csv_name = f"similarity_{matrix.mode}.csv"
        matrix.to_csv(os.path.join(out_dir, csv_name))
        png = plot_similarity_heatmap(matrix, os.path.join(out_dir, f"similarity_{matrix.mode}.png"))
        lines += [f"## {matrix.mode.capitalize()} similarity", '']
        lines += _markdown_table(matrix.to_frame())
        lines += ['', f"![{matrix.mode} similarity]({os.path.basename(png)})", '']

    if spaces:
        rows = []
        for name, space in spaces.items():
            space.to_csv(os.path.join(out_dir, f"space_{name}.csv"))
            plot_possibility_space(space, os.path.join(out_dir, f"space_{name}.png"), title=name)
            score = space.silhouette() if len(set(space.tags)) > 1 else float('nan')
            rows.append({'pair': name, 'silhouette': score})
        lines += ['## Possibility space', '']
        lines += _markdown_table(pd.DataFrame(rows, columns=['pair', 'silhouette']))
        lines.append('')

    path = os.path.join(out_dir, 'report.md')
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info(f"Wrote report to {path}")
    return path
