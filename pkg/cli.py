"""Command-line entry point for the whole workflow.

Every command resolves its TOML config plus overrides, writes the snapshot into
<out>/<command>-<hash>/ and puts its artifacts next to it.
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from backends import BackendConfig
from can_gan import (CanImageSampler, CanTrainConfig, build_discriminator, can_grid, load_can_checkpoint,
                     load_discriminator, pretrain_style_head, style_accuracy, train_can)
from config import apply_overrides, build_section, config_hash, default_log_level, load_config, resolved_snapshot
from data_pipeline import (REFERENCE_MEDIUMS_REPORT, CaptionCache, DataConfig, build_mediums_subset, fit_clusters,
                           fit_text_clusters, load_dataset, load_image_tensors)
from ddpo_trainer import (TOY_TARGETS, DDPOTrainer, TrainerConfig, inject_adapters, load_adapter_state,
                          train_ddpo, trainable_parameter_report)
from diffusion_core import DiffusionConfig, DiffusionImageSampler, build_policy, pretrain_denoiser
from errors import ConfigError, CreativeError
from evaluation.harness import (EvalConfig, EvalSet, ScoreTable, check_pairing, generate_eval_set, make_scorers,
                                score_eval_set)
from evaluation.report import build_report
from evaluation.similarity import similarity_matrix
from evaluation.space import pairwise_spaces, plot_possibility_space
from generate_toy_dataset import toy_denoising_images
from reward import RewardConfig, RewardStack
from run_storage import load_checkpoint, prepare_run_dir, save_checkpoint, write_json
from style_classifiers import ClusterModel, make_classifier
from utils.style_labels import get_default_style_labels, write_label_file

logger = logging.getLogger(__name__)

COMMANDS = ('subset-mediums', 'fit-clusters', 'train-disc', 'train-ddpo', 'train-can',
            'eval-generate', 'eval-score', 'eval-similarity', 'eval-space', 'report')

# sections whose `seed` follows --seed unless the config sets it explicitly
SEEDED_SECTIONS = {'trainer': 'seed', 'can': 'seed', 'diffusion': 'seed', 'data': 'kmeans_seed', 'eval': 'tsne_seed'}


@dataclass
class RunConfig:
    command: str
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    out_dir: str = 'runs'

    def resolve(self) -> Dict[str, Any]:
        config = apply_overrides(load_config(self.config_path), self.overrides)
        if self.seed is not None:
            for section, key in SEEDED_SECTIONS.items():
                config.setdefault(section, {}).setdefault(key, self.seed)
        return resolved_snapshot(config, self.command, self.seed)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML run config')
    common.add_argument('--override', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override one config value (repeatable)')
    common.add_argument('--seed', type=int, help='Global seed')
    common.add_argument('--out', default='runs', help='Output directory (default: runs/)')
    common.add_argument('--log-level', default=default_log_level(), help='Logging level (default: INFO)')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog='creative-diffusion',
                                     description='Style-ambiguity fine-tuning of diffusion models and its CAN baseline.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('subset-mediums', parents=[common], help='Caption a dataset and keep the top classes by keyword rate')
    p.add_argument('--dataset-root')
    p.add_argument('--top-n', type=int)

    p = sub.add_parser('fit-clusters', parents=[common], help='Fit k-means centers for the k-means classifier')
    p.add_argument('--k', type=int)
    p.add_argument('--dataset', choices=['full', 'mediums'], help='Label set (text source) or dataset name')
    p.add_argument('--dataset-root', help='Image dataset; without it the label texts are clustered')

    p = sub.add_parser('train-disc', parents=[common], help='Train a style-classifying discriminator on labeled images')
    p.add_argument('--dataset-root')
    p.add_argument('--steps', type=int)

    p = sub.add_parser('train-ddpo', parents=[common], help='Fine-tune a diffusion policy with the creative reward')
    p.add_argument('--epochs', type=int)

    p = sub.add_parser('train-can', parents=[common], help='Train the CAN baseline')
    p.add_argument('--dataset-root')
    p.add_argument('--grid-index', type=int, help='Run one of the 16 grid configurations (0-15)')
    p.add_argument('--max-steps', type=int)

    p = sub.add_parser('eval-generate', parents=[common], help='Sample a paired-seed eval set')
    p.add_argument('--n', type=int)
    p.add_argument('--base-seed', type=int)
    p.add_argument('--model-name')
    p.add_argument('--checkpoint')

    for name, help_text in (('eval-score', 'Score eval sets'), ('eval-space', 'Project eval sets to 2D'),
                            ('report', 'Assemble scores, similarities and projections')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('eval_sets', nargs='*')

    p = sub.add_parser('eval-similarity', parents=[common], help='Cross-model content/style similarity')
    p.add_argument('--mode', choices=['content', 'style'])
    p.add_argument('eval_sets', nargs='*')
    return parser


def _flag_overrides(args) -> List[str]:
    """Dedicated flags become ordinary overrides so the snapshot records them."""
    mapping = {
        'dataset_root': 'data.root', 'top_n': 'data.top_n', 'k': 'data.k', 'steps': 'can.style_head_steps',
        'epochs': 'trainer.epochs', 'max_steps': 'can.max_steps', 'n': 'eval.n', 'base_seed': 'eval.base_seed',
        'model_name': 'eval.model_name', 'checkpoint': 'eval.checkpoint', 'mode': 'eval.similarity_mode',
        'grid_index': 'run.grid_index',
    }
    overrides = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        overrides.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")
    if getattr(args, 'dataset', None):
        overrides.append(f"data.label_set={args.dataset!r}")
    if getattr(args, 'eval_sets', None):
        overrides.append('eval.eval_sets=[' + ', '.join(repr(p) for p in args.eval_sets) + ']')
    return overrides


def _section(resolved, cls, name):
    return build_section(cls, resolved.get(name), name)


def _labels(name: str):
    try:
        return get_default_style_labels().get(name)
    except KeyError as e:
        raise ConfigError(str(e)) from e


def _build_classifier(reward: RewardConfig, backends: BackendConfig, kind: Optional[str] = None):
    kind = kind or reward.classifier_kind
    if kind == 'none':
        return None
    if kind == 'zero_shot':
        return make_classifier(kind, labels=_labels(reward.label_set), similarity_backend=backends.load('similarity'),
                               temperature=reward.temperature)
    if kind == 'kmeans':
        if not reward.clusters_path:
            raise ConfigError("reward.clusters_path is required for the kmeans classifier")
        return make_classifier(kind, clusters=ClusterModel.load(reward.clusters_path),
                               embedder_backend=backends.load('embedder'), temperature=reward.temperature)
    if not reward.discriminator_path:
        raise ConfigError("reward.discriminator_path is required for the discriminator classifier")
    return make_classifier(kind, discriminator=load_discriminator(reward.discriminator_path),
                           temperature=reward.temperature)


def _load_eval_sets(config: EvalConfig) -> List[EvalSet]:
    if not config.eval_sets:
        raise ConfigError("No eval sets given (positional arguments or eval.eval_sets)")
    eval_sets = [EvalSet.load(path) for path in config.eval_sets]
    check_pairing(eval_sets)
    return eval_sets


def cmd_subset_mediums(resolved, run_dir, digest):
    data = _section(resolved, DataConfig, 'data')
    backends = _section(resolved, BackendConfig, 'backend')
    if not data.root:
        raise ConfigError("subset-mediums needs --dataset-root (data.root)")
    dataset = load_dataset(data.root, data.name or None)
    subset, report = build_mediums_subset(dataset, backends.load('captioner'), data.keywords, data.top_n,
                                          cache=CaptionCache(), workers=data.workers, retries=data.caption_retries)
    report.to_csv(os.path.join(run_dir, 'subset_report.csv'))
    write_label_file(os.path.join(run_dir, 'labels.txt'), subset.label_set)
    overlap = set(subset.label_set) & set(REFERENCE_MEDIUMS_REPORT.selected)
    logger.info(f"Subset keeps {len(subset.label_set)} classes; {len(overlap)} overlap the reference Mediums classes")
    write_json(os.path.join(run_dir, 'summary.json'), {
        'config_hash': digest, 'classes': list(subset.label_set), 'images': len(subset),
        'reference_overlap': sorted(overlap),
    })


def cmd_fit_clusters(resolved, run_dir, digest):
    data = _section(resolved, DataConfig, 'data')
    backends = _section(resolved, BackendConfig, 'backend')
    embedder = backends.load('embedder')
    if data.cluster_source == 'text' or not data.root:
        labels = _labels(data.label_set)
        model = fit_text_clusters(labels, embedder, data.k or len(labels), data.kmeans_seed, data.max_iter, data.tol)
    else:
        dataset = load_dataset(data.root, data.name or None)
        model = fit_clusters(dataset, embedder, data.k or len(dataset.label_set), data.kmeans_seed,
                             data.max_iter, data.tol, data.workers)
    path = model.save(os.path.join(run_dir, 'clusters.json'))
    logger.info(f"Saved {model.k} {model.source} clusters to {path}")


def cmd_train_disc(resolved, run_dir, digest):
    data = _section(resolved, DataConfig, 'data')
    can = _section(resolved, CanTrainConfig, 'can')
    if not data.root:
        raise ConfigError("train-disc needs --dataset-root (data.root)")
    dataset = load_dataset(data.root, data.name or None)
    tensors = load_image_tensors(dataset, can.image_dim)
    spec = can.discriminator_spec(len(dataset.label_set))
    discriminator = build_discriminator(spec, dataset.label_set)
    losses = pretrain_style_head(discriminator, tensors, steps=can.style_head_steps, batch_size=can.batch_size,
                                 lr=can.learning_rate, seed=can.seed)
    accuracy = style_accuracy(discriminator, tensors)
    logger.info(f"Style head trained: final loss {losses[-1]:.4f}, training accuracy {accuracy:.3f}")
    save_checkpoint(os.path.join(run_dir, 'discriminator.pt'), {'discriminator': discriminator.state_dict()}, digest,
                    metadata={'discriminator_spec': asdict(spec), 'labels': list(dataset.label_set),
                              'training_accuracy': accuracy})


def _prepare_policy(diffusion: DiffusionConfig, run_dir: Optional[str], digest: str):
    policy = build_policy(diffusion)
    if diffusion.policy == 'toy' and diffusion.pretrain_steps > 0:
        data = toy_denoising_images(diffusion.pretrain_samples, diffusion.image_size, diffusion.channels, diffusion.seed)
        result = pretrain_denoiser(policy, data, steps=diffusion.pretrain_steps, lr=diffusion.pretrain_lr,
                                   seed=diffusion.seed)
        logger.info(f"Toy denoiser MSE reduced by {100 * result.reduction:.1f}%")
        if run_dir:
            save_checkpoint(os.path.join(run_dir, 'base_network.pt'), {'network': policy.network.state_dict()}, digest,
                            metadata={'mse_before': result.mse_before, 'mse_after': result.mse_after})
    return policy


def cmd_train_ddpo(resolved, run_dir, digest):
    diffusion = _section(resolved, DiffusionConfig, 'diffusion')
    trainer_section = dict(resolved.get('trainer') or {})
    if diffusion.policy == 'toy':
        trainer_section.setdefault('adapter_targets', list(TOY_TARGETS))
    trainer_config = build_section(TrainerConfig, trainer_section, 'trainer')
    reward = _section(resolved, RewardConfig, 'reward')
    backends = _section(resolved, BackendConfig, 'backend')

    policy = _prepare_policy(diffusion, run_dir, digest)
    similarity = backends.load('similarity') if reward.lambda_utility > 0 else None
    stack = RewardStack(reward, _build_classifier(reward, backends), similarity)
    trainer = DDPOTrainer(policy, trainer_config, stack)
    report = trainable_parameter_report(policy.network)
    logger.info(f"Trainable parameters: {report['trainable']:,} of {report['total']:,} ({100 * report['fraction']:.3f}%)")
    history = train_ddpo(trainer, run_dir, digest)
    write_json(os.path.join(run_dir, 'summary.json'), {
        'config_hash': digest, 'parameters': report,
        'final_epoch': history[-1].to_log_row() if history else None,
    })


def cmd_train_can(resolved, run_dir, digest):
    data = _section(resolved, DataConfig, 'data')
    can = _section(resolved, CanTrainConfig, 'can')
    grid_index = (resolved.get('run') or {}).get('grid_index')
    if grid_index is not None:
        grid = can_grid(can)
        if not 0 <= int(grid_index) < len(grid):
            raise ConfigError(f"--grid-index must lie in [0, {len(grid) - 1}]")
        can = grid[int(grid_index)]
        logger.info(f"Grid run {grid_index}: {can.image_dim}px {can.dataset} batch {can.batch_size} GP={can.gradient_penalty}")
    if not data.root:
        raise ConfigError("train-can needs --dataset-root (data.root)")
    dataset = load_dataset(data.root, data.name or None)
    result = train_can(can, load_image_tensors(dataset, can.image_dim), out_dir=run_dir, digest=digest)
    write_json(os.path.join(run_dir, 'summary.json'), {
        'config_hash': digest, 'parameter_counts': result.parameter_counts,
        'final': result.history.iloc[-1].to_dict() if len(result.history) else None,
    })


def _build_sampler(resolved, config: EvalConfig):
    if config.sampler == 'can':
        if not config.checkpoint:
            raise ConfigError("eval.checkpoint is required for the CAN sampler")
        generator, _, _ = load_can_checkpoint(config.checkpoint)
        return CanImageSampler(generator)

    diffusion = _section(resolved, DiffusionConfig, 'diffusion')
    policy = build_policy(diffusion)
    if config.checkpoint:
        run_dir = os.path.dirname(os.path.abspath(config.checkpoint))
        base_path = os.path.join(run_dir, 'base_network.pt')
        if os.path.exists(base_path):
            policy.network.load_state_dict(load_checkpoint(base_path)['tensors']['network'])
        payload = load_checkpoint(config.checkpoint)
        meta = payload.get('metadata', {})
        targets = meta.get('targets') or list(TOY_TARGETS)
        rank = int(meta.get('rank', 4))
        inject_adapters(policy.network, targets, rank=rank, alpha=float(meta.get('alpha', rank)))
        load_adapter_state(policy, payload['tensors'])
    elif diffusion.policy == 'toy' and diffusion.pretrain_steps > 0:
        policy = _prepare_policy(diffusion, None, '')
    policy.eval()
    return DiffusionImageSampler(policy, config.n_steps, config.eta)


def cmd_eval_generate(resolved, run_dir, digest):
    config = _section(resolved, EvalConfig, 'eval')
    name = config.model_name or ('can' if config.sampler == 'can' else (resolved.get('run') or {}).get('name', 'model'))
    eval_set = generate_eval_set(_build_sampler(resolved, config), name, config.prompts, config.base_seed, config.n)
    eval_set.save(os.path.join(run_dir, name))


def _scorers(resolved, config: EvalConfig):
    backends = _section(resolved, BackendConfig, 'backend')
    reward = resolved.get('reward') or {}
    kwargs = {}
    if 'aesthetic' in config.metrics:
        kwargs['aesthetic_backend'] = backends.load('aesthetic')
    if 'image_reward' in config.metrics:
        kwargs['image_reward_backend'] = backends.load('image_reward')
    if 'prompt_alignment' in config.metrics:
        kwargs['similarity_backend'] = backends.load('similarity')
    if 'dcr' in config.metrics:
        path = reward.get('discriminator_path', '')
        if not path:
            raise ConfigError("The dcr metric needs reward.discriminator_path")
        kwargs['discriminator_classifier'] = make_classifier('discriminator', discriminator=load_discriminator(path))
    if 'ccr' in config.metrics:
        kwargs['zero_shot_classifier'] = make_classifier('zero_shot', labels=_labels(reward.get('label_set', 'full')),
                                                         similarity_backend=backends.load('similarity'))
    return make_scorers(config.metrics, **kwargs)


def _score(resolved, config: EvalConfig, eval_sets) -> ScoreTable:
    scorers = _scorers(resolved, config)
    return ScoreTable.merge([score_eval_set(s, scorers, config.workers) for s in eval_sets])


def cmd_eval_score(resolved, run_dir, digest):
    config = _section(resolved, EvalConfig, 'eval')
    table = _score(resolved, config, _load_eval_sets(config))
    table.to_csv(run_dir)
    for model in table.models:
        logger.info(f"{model}: " + ', '.join(f"{m} {table.cell(model, m)}" for m in table.summaries[model]))


def cmd_eval_similarity(resolved, run_dir, digest):
    config = _section(resolved, EvalConfig, 'eval')
    backends = _section(resolved, BackendConfig, 'backend')
    matrix = similarity_matrix(_load_eval_sets(config), backends.load('style_embedder'), config.similarity_mode,
                               config.workers)
    matrix.to_csv(os.path.join(run_dir, f"similarity_{config.similarity_mode}.csv"))


def _spaces(resolved, config: EvalConfig, eval_sets):
    backends = _section(resolved, BackendConfig, 'backend')
    spaces = pairwise_spaces(eval_sets, backends.load('style_embedder'), mode=config.similarity_mode,
                             pca_dim=config.pca_dim, perplexity=config.perplexity, seed=config.tsne_seed,
                             workers=config.workers)
    return {f"{a}__{b}": space for (a, b), space in spaces.items()}


def cmd_eval_space(resolved, run_dir, digest):
    config = _section(resolved, EvalConfig, 'eval')
    for name, space in _spaces(resolved, config, _load_eval_sets(config)).items():
        space.to_csv(os.path.join(run_dir, f"space_{name}.csv"))
        plot_possibility_space(space, os.path.join(run_dir, f"space_{name}.png"), title=name)


def cmd_report(resolved, run_dir, digest):
    config = _section(resolved, EvalConfig, 'eval')
    backends = _section(resolved, BackendConfig, 'backend')
    eval_sets = _load_eval_sets(config)
    embedder = backends.load('style_embedder')
    similarities = [similarity_matrix(eval_sets, embedder, mode, config.workers) for mode in ('content', 'style')]
    spaces = _spaces(resolved, config, eval_sets) if len(eval_sets) > 1 else {}
    build_report(run_dir, _score(resolved, config, eval_sets), similarities, spaces, digest)


HANDLERS = {
    'subset-mediums': cmd_subset_mediums,
    'fit-clusters': cmd_fit_clusters,
    'train-disc': cmd_train_disc,
    'train-ddpo': cmd_train_ddpo,
    'train-can': cmd_train_can,
    'eval-generate': cmd_eval_generate,
    'eval-score': cmd_eval_score,
    'eval-similarity': cmd_eval_similarity,
    'eval-space': cmd_eval_space,
    'report': cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"Unknown log level: {args.log_level}", file=sys.stderr)
        return 2
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s %(message)s', force=True)

    run = RunConfig(args.command, args.config, list(args.override) + _flag_overrides(args), args.seed, args.out)
    start = time.time()
    try:
        resolved = run.resolve()
        digest = config_hash(resolved)
        run_dir = prepare_run_dir(run.out_dir, run.command, resolved)
        HANDLERS[run.command](resolved, run_dir, digest)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except CreativeError as e:
        logger.error(f"{run.command} failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"{run.command} failed: {e}")
        return 1
    logger.info(f"{run.command} finished in {time.time() - start:.2f} seconds")
    return 0
