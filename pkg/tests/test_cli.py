import glob
import os

import numpy as np
import pytest

from can_gan import load_discriminator
from cli import build_parser, main
from run_storage import load_config_snapshot, read_json, read_jsonl
from style_classifiers import ClusterModel

TINY_DIFFUSION = ['diffusion.pretrain_steps=50', 'diffusion.pretrain_samples=256', 'diffusion.hidden_dim=32',
                  'backend.embed_dim=32']


def run_dirs(out, command):
    return sorted(glob.glob(os.path.join(str(out), f"{command}-*")))


def overrides(*items):
    args = []
    for item in items:
        args += ['--override', item]
    return args


def test_parser_knows_every_command():
    parser = build_parser()
    args = parser.parse_args(['eval-similarity', '--mode', 'style', 'a', 'b'])
    assert (args.command, args.mode, args.eval_sets) == ('eval-similarity', 'style', ['a', 'b'])


def test_bad_invocations_exit_with_two(tmp_path):
    assert main(['paint']) == 2
    assert main(['fit-clusters', '--log-level', 'chatty', '--out', str(tmp_path)]) == 2
    assert main(['fit-clusters', '--config', str(tmp_path / 'missing.toml'), '--out', str(tmp_path)]) == 2
    assert main(['fit-clusters', '--out', str(tmp_path)] + overrides('palette.k=3')) == 2


def test_fit_clusters_from_label_texts_is_repeatable(tmp_path):
    argv = ['fit-clusters', '--k', '3', '--dataset', 'mediums', '--out', str(tmp_path), '--seed', '4'] + \
        overrides('backend.embed_dim=32')
    assert main(argv) == 0
    (run_dir,) = run_dirs(tmp_path, 'fit-clusters')
    first = ClusterModel.load(os.path.join(run_dir, 'clusters.json'))
    assert (first.k, first.embed_dim, first.source, first.fit_seed) == (3, 32, 'text', 4)

    snapshot = load_config_snapshot(run_dir)
    assert snapshot['data']['k'] == 3 and snapshot['data']['label_set'] == 'mediums'
    assert snapshot['run'] == {'command': 'fit-clusters', 'seed': 4}

    assert main(argv) == 0
    assert run_dirs(tmp_path, 'fit-clusters') == [run_dir]
    np.testing.assert_array_equal(ClusterModel.load(os.path.join(run_dir, 'clusters.json')).centers, first.centers)


def test_cluster_count_defaults_to_label_set_size(tmp_path):
    assert main(['fit-clusters', '--dataset', 'mediums', '--out', str(tmp_path)] + overrides('backend.embed_dim=32')) == 0
    (run_dir,) = run_dirs(tmp_path, 'fit-clusters')
    assert ClusterModel.load(os.path.join(run_dir, 'clusters.json')).k == 10


def test_subset_mediums_on_toy_dataset(tmp_path, toy_dataset_root):
    out = tmp_path / 'runs'
    assert main(['subset-mediums', '--dataset-root', toy_dataset_root, '--top-n', '2', '--out', str(out)]) == 0
    (run_dir,) = run_dirs(out, 'subset-mediums')
    summary = read_json(os.path.join(run_dir, 'summary.json'))
    assert len(summary['classes']) == 2
    assert summary['images'] == 12
    assert summary['reference_overlap'] == []
    for name in ('subset_report.csv', 'labels.txt', 'config_snapshot.json'):
        assert os.path.exists(os.path.join(run_dir, name))


def test_subset_mediums_needs_a_root(tmp_path):
    assert main(['subset-mediums', '--out', str(tmp_path)]) == 2


def test_train_disc_writes_a_loadable_discriminator(tmp_path, toy_dataset_root):
    out = tmp_path / 'runs'
    argv = ['train-disc', '--dataset-root', toy_dataset_root, '--steps', '20', '--out', str(out)] + \
        overrides('can.toy=true', 'can.image_dim=16', 'can.batch_size=8')
    assert main(argv) == 0
    (run_dir,) = run_dirs(out, 'train-disc')
    discriminator = load_discriminator(os.path.join(run_dir, 'discriminator.pt'))
    assert len(discriminator.labels) == 5


def test_unknown_trainer_key_is_a_config_error(tmp_path):
    assert main(['train-ddpo', '--out', str(tmp_path)] + overrides('trainer.momentum=0.9')) == 2


def test_train_then_evaluate(tmp_path):
    out = str(tmp_path / 'runs')
    train = ['train-ddpo', '--epochs', '1', '--out', out] + overrides(
        *TINY_DIFFUSION, 'trainer.effective_batch=2', 'trainer.batches_per_epoch=1', 'trainer.inference_steps=3',
        'reward.classifier_kind=zero_shot', 'reward.label_set=mediums')
    assert main(train) == 0
    (train_dir,) = run_dirs(out, 'train-ddpo')
    for name in ('adapters.pt', 'base_network.pt', 'epoch_log.jsonl', 'rewards.jsonl', 'summary.json'):
        assert os.path.exists(os.path.join(train_dir, name)), name
    assert len(read_jsonl(os.path.join(train_dir, 'epoch_log.jsonl'))) == 1
    assert len(read_jsonl(os.path.join(train_dir, 'rewards.jsonl'))) == 2

    generate = ['eval-generate', '--n', '4', '--out', out] + overrides(*TINY_DIFFUSION, 'eval.n_steps=3')
    tuned = generate + ['--model-name', 'tuned', '--checkpoint', os.path.join(train_dir, 'adapters.pt')]
    assert main(tuned) == 0
    assert main(generate + ['--model-name', 'base']) == 0
    tuned_dir, = glob.glob(os.path.join(out, 'eval-generate-*', 'tuned'))
    base_dir, = glob.glob(os.path.join(out, 'eval-generate-*', 'base'))
    manifest = read_json(os.path.join(tuned_dir, 'manifest.json'))
    assert len(manifest['items']) == 4
    assert all(item['file'] and 'error' not in item for item in manifest['items'])

    assert main(tuned) == 0
    assert read_json(os.path.join(tuned_dir, 'manifest.json')) == manifest

    assert main(['eval-score', tuned_dir, base_dir, '--out', out] + overrides('backend.embed_dim=32')) == 0
    (score_dir,) = run_dirs(out, 'eval-score')
    assert os.path.exists(os.path.join(score_dir, 'scores_formatted.csv'))

    assert main(['report', tuned_dir, base_dir, '--out', out] + overrides('backend.embed_dim=32')) == 0
    (report_dir,) = run_dirs(out, 'report')
    text = open(os.path.join(report_dir, 'report.md')).read()
    assert '## Scores' in text and '## Style similarity' in text
    assert os.path.exists(os.path.join(report_dir, 'space_tuned__base.csv'))


def test_eval_commands_need_eval_sets(tmp_path):
    assert main(['eval-score', '--out', str(tmp_path)]) == 2


@pytest.mark.parametrize('index', ['16', '-1'])
def test_grid_index_is_bounded(tmp_path, index):
    assert main(['train-can', '--grid-index', index, '--out', str(tmp_path)]) == 2


def test_rerun_into_the_same_run_dir_reproduces_the_logs(tmp_path):
    out = str(tmp_path / 'runs')
    train = ['train-ddpo', '--epochs', '2', '--out', out] + overrides(
        *TINY_DIFFUSION, 'trainer.effective_batch=2', 'trainer.batches_per_epoch=1', 'trainer.inference_steps=3',
        'reward.classifier_kind=zero_shot', 'reward.label_set=mediums')
    assert main(train) == 0
    (train_dir,) = run_dirs(out, 'train-ddpo')
    rewards = open(os.path.join(train_dir, 'rewards.jsonl'), 'rb').read()
    epochs = read_jsonl(os.path.join(train_dir, 'epoch_log.jsonl'))

    assert main(train) == 0
    assert run_dirs(out, 'train-ddpo') == [train_dir]
    assert open(os.path.join(train_dir, 'rewards.jsonl'), 'rb').read() == rewards
    again = read_jsonl(os.path.join(train_dir, 'epoch_log.jsonl'))
    assert len(again) == len(epochs) == 2
    assert [{k: v for k, v in row.items() if k != 'seconds'} for row in again] == \
        [{k: v for k, v in row.items() if k != 'seconds'} for row in epochs]
