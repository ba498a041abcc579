import logging
import os
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import ttest_rel
from tqdm import tqdm

from diffusion_core import DenoisingPolicy, Trajectory, derive_sample_seed, sample_batch, step_log_prob, to_image_array
from errors import ConfigError, NonFiniteLossError, ShapeError
from reward import PromptStatTracker, RewardRecord, RewardStack
from run_storage import append_jsonl, save_checkpoint
from style_classifiers import style_ambiguity

logger = logging.getLogger(__name__)

# every attention projection of both attention blocks in a transformer block
ATTENTION_TARGETS = ('to_q', 'to_k', 'to_v', 'to_out.0')
TOY_TARGETS = ('hidden', 'out')


@dataclass
class TrainerConfig:
    epochs: int = 25
    effective_batch: int = 8
    batches_per_epoch: int = 32
    inference_steps: int = 30
    adapter_rank: int = 4
    adapter_alpha: float = 4.0
    learning_rate: float = 0.0015
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weight_decay: float = 1e-4
    adam_epsilon: float = 1e-8
    clip_range: float = 0.2
    inner_epochs: int = 1
    max_grad_norm: float = 1.0
    eta: float = 1.0
    prompts: Tuple[str, ...] = ('painting', 'drawing', 'art')
    adapter_targets: Tuple[str, ...] = ATTENTION_TARGETS
    seed: int = 0

    def __post_init__(self):
        positive = ('epochs', 'effective_batch', 'batches_per_epoch', 'inference_steps', 'adapter_rank',
                    'adapter_alpha', 'learning_rate', 'adam_epsilon', 'inner_epochs', 'max_grad_norm')
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"trainer.{name} must be positive")
        if not 0.0 < self.clip_range < 1.0:
            raise ConfigError("trainer.clip_range must lie in (0, 1)")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError("trainer.eta must lie in (0, 1]; the policy needs a density")
        if self.weight_decay < 0 or not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Invalid optimizer constants")
        self.prompts = tuple(self.prompts)
        self.adapter_targets = tuple(self.adapter_targets)
        if not self.prompts:
            raise ConfigError("trainer.prompts must not be empty")

    @property
    def adapter_scale(self) -> float:
        return self.adapter_alpha / self.adapter_rank


class LowRankAdapter(nn.Module):
    """delta(x) = scale * A (B x); A (out x r) starts at zero so the adapted layer starts equal to its base."""

    def __init__(self, in_features: int, out_features: int, rank: int = 4, alpha: float = 4.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ConfigError("Adapter rank must be >= 1")
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.enabled = True
        self.lora_A = nn.Parameter(torch.zeros(out_features, rank))
        self.lora_B = nn.Parameter(torch.randn(rank, in_features, generator=generator) / rank)

    @property
    def in_features(self) -> int:
        return self.lora_B.shape[1]

    @property
    def out_features(self) -> int:
        return self.lora_A.shape[0]

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.lora_B.t().to(x.dtype)) @ self.lora_A.t().to(x.dtype))

    def delta_weight(self) -> torch.Tensor:
        return self.scale * self.lora_A @ self.lora_B


def apply_adapter(base_layer: nn.Linear, adapter: LowRankAdapter, input: torch.Tensor) -> torch.Tensor:
    if input.shape[-1] != base_layer.in_features or adapter.in_features != base_layer.in_features \
            or adapter.out_features != base_layer.out_features:
        raise ShapeError(f"Adapter {adapter.out_features}x{adapter.in_features} / base "
                         f"{base_layer.out_features}x{base_layer.in_features} / input {tuple(input.shape)} mismatch")
    out = base_layer(input)
    if not adapter.enabled:
        return out
    return out + adapter.delta(input)


class AdaptedLinear(nn.Module):
    def __init__(self, base: nn.Linear, adapter: LowRankAdapter):
        super().__init__()
        self.base = base
        self.adapter = adapter

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def weight(self):
        return self.base.weight

    @property
    def bias(self):
        return self.base.bias

    def forward(self, x):
        return apply_adapter(self.base, self.adapter, x)


def _matches(name: str, targets: Sequence[str]) -> bool:
    return any(name == t or name.endswith('.' + t) for t in targets)


def inject_adapters(model: nn.Module, targets: Sequence[str], rank: int = 4, alpha: float = 4.0,
                    seed: int = 0) -> Dict[str, LowRankAdapter]:
    """Freeze every parameter of `model` and wrap each targeted nn.Linear with a trainable adapter."""
    model.requires_grad_(False)
    generator = torch.Generator().manual_seed(seed)
    found = [(name, module) for name, module in model.named_modules()
             if isinstance(module, nn.Linear) and _matches(name, targets)]
    if not found:
        raise ConfigError(f"No nn.Linear layers match adapter targets {list(targets)}")

    adapters: Dict[str, LowRankAdapter] = {}
    for name, layer in found:
        adapter = LowRankAdapter(layer.in_features, layer.out_features, rank, alpha, generator)
        adapter.to(layer.weight.device, layer.weight.dtype)
        parent_name, _, child = name.rpartition('.')
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, child, AdaptedLinear(layer, adapter))
        adapters[name] = adapter
    logger.info(f"Injected {len(adapters)} rank-{rank} adapters ({sum(a.lora_A.numel() + a.lora_B.numel() for a in adapters.values()):,} trainable parameters)")
    return adapters


def adapter_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for m in model.modules() if isinstance(m, LowRankAdapter) for p in m.parameters()]


def set_adapters_enabled(model: nn.Module, enabled: bool):
    for m in model.modules():
        if isinstance(m, LowRankAdapter):
            m.enabled = enabled


def adapter_state_dict(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {name: p.detach().cpu().clone() for name, p in model.named_parameters() if 'lora_' in name}


def load_adapter_state(model: nn.Module, state: Dict[str, torch.Tensor]):
    params = dict(model.named_parameters())
    missing = sorted(set(state) - set(params))
    if missing:
        raise ShapeError(f"Adapter checkpoint has parameters the model lacks: {missing[:3]}")
    with torch.no_grad():
        for name, value in state.items():
            params[name].copy_(value)


def trainable_parameter_report(model: nn.Module) -> Dict[str, float]:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return {'total': total, 'trainable': trainable, 'fraction': trainable / total if total else 0.0}


def clipped_surrogate(logp_new: torch.Tensor, logp_old: torch.Tensor, advantage: torch.Tensor,
                      clip_range: float) -> torch.Tensor:
    """Elementwise min(r A, clip(r, 1-eps, 1+eps) A) with r = exp(logp_new - logp_old)."""
    ratio = torch.exp(logp_new - logp_old)
    return torch.minimum(ratio * advantage, torch.clamp(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantage)


def clipped_objective(logp_new, logp_old, advantage, clip_range: float = 0.2) -> torch.Tensor:
    """Mean clipped surrogate; the trainer ascends it."""
    logp_new = torch.as_tensor(logp_new, dtype=torch.float64)
    logp_old = torch.as_tensor(logp_old, dtype=torch.float64)
    advantage = torch.as_tensor(advantage, dtype=torch.float64)
    return clipped_surrogate(logp_new, logp_old, advantage, clip_range).mean()


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    mean_advantage: float
    mean_novelty: float
    mean_utility: float
    clip_fraction: float
    first_update_clip_fraction: float
    grad_norm: float
    loss: float
    n_samples: int
    n_updates: int
    skipped_updates: int
    seconds: float

    def to_log_row(self) -> dict:
        return asdict(self)


class DDPOTrainer:
    """Sample -> reward -> per-prompt advantages -> clipped policy-gradient ascent on adapter weights."""

    def __init__(self, policy: DenoisingPolicy, config: TrainerConfig, reward_stack: RewardStack,
                 adapters: Optional[Dict[str, LowRankAdapter]] = None):
        self.policy = policy
        self.config = config
        self.reward_stack = reward_stack
        if adapters is None:
            adapters = inject_adapters(policy.network, config.adapter_targets, config.adapter_rank,
                                       config.adapter_alpha, seed=config.seed)
        self.adapters = adapters
        self.trainable = adapter_parameters(policy)
        if not self.trainable:
            raise ConfigError("Policy has no adapter parameters to train")
        self.optimizer = torch.optim.AdamW(self.trainable, lr=config.learning_rate,
                                           betas=(config.adam_beta1, config.adam_beta2),
                                           weight_decay=config.weight_decay, eps=config.adam_epsilon)
        self.tracker = PromptStatTracker()
        self.epoch = 0
        self.last_records: List[RewardRecord] = []

    def _sample_round(self, epoch: int) -> Tuple[List[Trajectory], List[RewardRecord]]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, epoch])
        n = cfg.batches_per_epoch * cfg.effective_batch
        prompts = [cfg.prompts[i] for i in rng.integers(0, len(cfg.prompts), size=n)]
        sample_ids = [epoch * n + i for i in range(n)]
        seeds = [derive_sample_seed(cfg.seed, sid) for sid in sample_ids]

        self.policy.eval()
        trajectories: List[Trajectory] = []
        for b in range(cfg.batches_per_epoch):
            sl = slice(b * cfg.effective_batch, (b + 1) * cfg.effective_batch)
            trajectories.extend(sample_batch(self.policy, prompts[sl], seeds[sl], cfg.inference_steps,
                                             eta=cfg.eta, sample_ids=sample_ids[sl]))
        with torch.no_grad():
            decoded = [self.policy.codec.decode(t.final.unsqueeze(0))[0] for t in trajectories]
        records = [self.reward_stack.score(to_image_array(img), t.prompt, t.sample_id)
                   for img, t in zip(decoded, trajectories)]
        return trajectories, records

    def _batch_loss(self, batch: List[Trajectory], advantages: torch.Tensor, diagnostics: dict):
        """Accumulate gradients over every timestep of one batch; returns (loss, clipped, total)."""
        cfg = self.config
        device = self.trainable[0].device
        x = torch.stack([t.states for t in batch]).to(device)
        old = torch.stack([t.log_probs for t in batch]).to(device)
        contexts = None if batch[0].context is None else torch.stack([t.context for t in batch]).to(device)
        n_steps = len(batch[0].timesteps)
        total_loss, clipped, counted = 0.0, 0, 0
        for j, (t, t_prev) in enumerate(batch[0].timesteps):
            logp = step_log_prob(self.policy, x[:, j], x[:, j + 1], t, t_prev, contexts, batch[0].eta)
            objective = clipped_surrogate(logp, old[:, j].double(), advantages, cfg.clip_range)
            loss = -objective.mean() / n_steps
            if not torch.isfinite(loss):
                raise NonFiniteLossError("Non-finite DDPO loss", {**diagnostics, 'timestep': t, 'loss': float(loss)})
            loss.backward()
            total_loss += float(loss)
            with torch.no_grad():
                ratio = torch.exp(logp - old[:, j].double())
                clipped += int(((ratio - 1.0).abs() > cfg.clip_range).sum())
                counted += ratio.numel()
        return total_loss, clipped, counted

    def train_epoch(self, epoch: Optional[int] = None) -> EpochStats:
        cfg = self.config
        epoch = self.epoch if epoch is None else epoch
        start = time.time()
        trajectories, records = self._sample_round(epoch)
        advantages = self.tracker.update_batch([r.prompt for r in records], [r.total for r in records])
        for record, adv in zip(records, advantages):
            record.advantage = float(adv)
        self.last_records = records

        clipped = counted = 0
        first_fraction = 0.0
        grad_norms, losses = [], []
        n_updates = skipped = 0
        # all-zero advantages give a zero gradient; stepping would still apply decoupled weight decay
        if np.all(advantages == 0):
            skipped = cfg.batches_per_epoch * cfg.inner_epochs
            logger.info(f"Epoch {epoch}: every advantage is zero, skipping {skipped} updates")
        else:
            self.policy.train()
            for inner in range(cfg.inner_epochs):
                for b in range(cfg.batches_per_epoch):
                    sl = slice(b * cfg.effective_batch, (b + 1) * cfg.effective_batch)
                    adv = torch.as_tensor(advantages[sl], dtype=torch.float64, device=self.trainable[0].device)
                    self.optimizer.zero_grad()
                    loss, c, n = self._batch_loss(trajectories[sl], adv, {'epoch': epoch, 'batch': b, 'inner': inner})
                    if n_updates == 0:
                        first_fraction = c / n if n else 0.0
                    norm = torch.nn.utils.clip_grad_norm_(self.trainable, cfg.max_grad_norm)
                    if not torch.isfinite(norm):
                        raise NonFiniteLossError("Non-finite DDPO gradient", {'epoch': epoch, 'batch': b, 'grad_norm': float(norm)})
                    self.optimizer.step()
                    clipped += c
                    counted += n
                    grad_norms.append(float(norm))
                    losses.append(loss)
                    n_updates += 1
            self.policy.eval()

        self.epoch = epoch + 1
        stats = EpochStats(
            epoch=epoch,
            mean_reward=float(np.mean([r.total for r in records])),
            mean_advantage=float(np.mean(advantages)),
            mean_novelty=float(np.mean([r.novelty_term for r in records])),
            mean_utility=float(np.mean([r.utility_term for r in records])),
            clip_fraction=clipped / counted if counted else 0.0,
            first_update_clip_fraction=first_fraction,
            grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
            loss=float(np.mean(losses)) if losses else 0.0,
            n_samples=len(records),
            n_updates=n_updates,
            skipped_updates=skipped,
            seconds=time.time() - start,
        )
        logger.info(f"Epoch {epoch}: reward {stats.mean_reward:.4f} novelty {stats.mean_novelty:.4f} "
                    f"utility {stats.mean_utility:.4f} clip {stats.clip_fraction:.3f} in {stats.seconds:.2f} seconds")
        return stats


def train_ddpo(trainer: DDPOTrainer, out_dir: Optional[str] = None, digest: str = '',
               epochs: Optional[int] = None) -> List[EpochStats]:
    """Run the epoch loop, appending to epoch_log.jsonl / rewards.jsonl and checkpointing adapters."""
    history = []
    epochs = epochs or trainer.config.epochs
    if out_dir:
        # a rerun of the same config lands in the same directory; its logs start over
        for name in ('epoch_log.jsonl', 'rewards.jsonl'):
            path = os.path.join(out_dir, name)
            if os.path.exists(path):
                logger.info(f"Replacing {path} from an earlier run")
                os.remove(path)
    for _ in tqdm(range(epochs), desc='DDPO epochs'):
        stats = trainer.train_epoch()
        history.append(stats)
        if out_dir:
            append_jsonl(os.path.join(out_dir, 'epoch_log.jsonl'), [{**stats.to_log_row(), 'config_hash': digest}])
            append_jsonl(os.path.join(out_dir, 'rewards.jsonl'), [r.to_log_row() for r in trainer.last_records])
    if out_dir:
        save_checkpoint(os.path.join(out_dir, 'adapters.pt'), adapter_state_dict(trainer.policy), digest,
                        metadata={'epochs': trainer.epoch, 'clip_range': trainer.config.clip_range,
                                  'rank': trainer.config.adapter_rank, 'alpha': trainer.config.adapter_alpha,
                                  'utility_scale': trainer.reward_stack.utility_scale,
                                  'targets': list(trainer.config.adapter_targets)})
    return history


def mean_ambiguity_over_samples(policy: DenoisingPolicy, classifier, prompts: Sequence[str], seeds: Sequence[int],
                                n_steps: int, eta: float = 1.0) -> np.ndarray:
    """Style-ambiguity CE of freshly sampled images, one value per (prompt, seed)."""
    values = []
    for start in range(0, len(seeds), 64):
        batch = sample_batch(policy, list(prompts[start:start + 64]), list(seeds[start:start + 64]), n_steps, eta)
        with torch.no_grad():
            for t in batch:
                image = to_image_array(policy.codec.decode(t.final.unsqueeze(0))[0])
                values.append(style_ambiguity(classifier(image)))
    return np.asarray(values)


def ambiguity_improvement(before: np.ndarray, after: np.ndarray) -> Tuple[float, float]:
    """One-sided paired t-test that `after` is lower than `before`; returns (statistic, p-value)."""
    result = ttest_rel(after, before, alternative='less')
    return float(result.statistic), float(result.pvalue)
