import pytest

from config import (SECTIONS, apply_overrides, build_section, config_hash, load_config, parse_override_value,
                    resolved_snapshot)
from ddpo_trainer import TrainerConfig
from errors import ConfigError


def write_toml(tmp_path, text):
    path = tmp_path / 'run.toml'
    path.write_text(text)
    return str(path)


def test_missing_path_gives_every_section():
    config = load_config(None)
    assert set(config) == set(SECTIONS)
    assert all(section == {} for section in config.values())


def test_load_config_reads_tables(tmp_path):
    path = write_toml(tmp_path, '[trainer]\nepochs = 3\nprompts = ["a", "b"]\n\n[reward]\nlambda_utility = 0.5\n')
    config = load_config(path)
    assert config['trainer'] == {'epochs': 3, 'prompts': ['a', 'b']}
    assert config['reward']['lambda_utility'] == 0.5
    assert config['can'] == {}


def test_load_config_rejects_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match='Unknown config section'):
        load_config(write_toml(tmp_path, '[bogus]\nx = 1\n'))


def test_load_config_rejects_bad_toml(tmp_path):
    with pytest.raises(ConfigError, match='Invalid TOML'):
        load_config(write_toml(tmp_path, '[trainer\nepochs = 3\n'))


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'nope.toml'))


def test_override_values_are_typed():
    assert parse_override_value('0.003') == 0.003
    assert parse_override_value('true') is True
    assert parse_override_value('["a", "b"]') == ['a', 'b']
    assert parse_override_value('zero_shot') == 'zero_shot'
    assert parse_override_value("'data/toy'") == 'data/toy'


def test_apply_overrides_does_not_touch_input():
    config = load_config(None)
    resolved = apply_overrides(config, ['trainer.learning_rate=0.003', 'reward.classifier_kind=zero_shot'])
    assert resolved['trainer']['learning_rate'] == 0.003
    assert resolved['reward']['classifier_kind'] == 'zero_shot'
    assert config['trainer'] == {}


@pytest.mark.parametrize('override', ['trainer', 'trainer.epochs', 'bogus.epochs=1', 'trainer.a.b=1', '.x=1'])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        apply_overrides(load_config(None), [override])


def test_config_hash_ignores_key_order():
    a = {'trainer': {'epochs': 3, 'seed': 1}, 'run': {'command': 'train-ddpo'}}
    b = {'run': {'command': 'train-ddpo'}, 'trainer': {'seed': 1, 'epochs': 3}}
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    assert config_hash(a) != config_hash({**a, 'trainer': {'epochs': 4, 'seed': 1}})


def test_build_section_turns_lists_into_tuples():
    config = build_section(TrainerConfig, {'prompts': ['a', 'b'], 'epochs': 2}, 'trainer')
    assert config.prompts == ('a', 'b')
    assert config.epochs == 2


def test_build_section_rejects_unknown_keys():
    with pytest.raises(ConfigError, match=r'\[trainer\]'):
        build_section(TrainerConfig, {'epoch': 2}, 'trainer')


def test_build_section_wraps_validation_errors():
    with pytest.raises(ConfigError):
        build_section(TrainerConfig, {'clip_range': 2.0}, 'trainer')


def test_resolved_snapshot_records_command_and_seed():
    snapshot = resolved_snapshot(load_config(None), 'train-can', 7)
    assert snapshot['run'] == {'command': 'train-can', 'seed': 7}
