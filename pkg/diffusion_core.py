"""Noise schedules, the forward process, and the DDIM reverse sampler viewed as a stochastic policy.

Timesteps are 1-indexed (1..T) with alpha_bar(0) == 1. Reverse steps follow the pretrained
scheduler convention: unless `final_alpha_one` is set, the step that lands on t_prev = 0 uses
alpha_bar(1) as its "previous" value so that every step keeps a proper Gaussian density.
"""
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import default_device
from errors import BackendUnavailableError, ConfigError, ContractViolation, ShapeError

logger = logging.getLogger(__name__)

MIN_VARIANCE = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiffusionConfig:
    policy: str = 'toy'
    schedule: str = 'linear'
    num_train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    eta: float = 1.0
    final_alpha_one: bool = False
    image_size: int = 8
    channels: int = 1
    context_dim: int = 8
    hidden_dim: int = 256
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_samples: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ('linear', 'scaled_linear'):
            raise ConfigError(f"Unknown schedule: {self.schedule}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.num_train_timesteps < 1:
            raise ConfigError("num_train_timesteps must be positive")

    def build_schedule(self) -> 'NoiseSchedule':
        if self.schedule == 'scaled_linear':
            return NoiseSchedule.scaled_linear(self.num_train_timesteps, self.beta_start, self.beta_end,
                                               final_alpha_one=self.final_alpha_one)
        return NoiseSchedule.linear(self.num_train_timesteps, self.beta_start, self.beta_end,
                                    final_alpha_one=self.final_alpha_one)


class NoiseSchedule:
    def __init__(self, betas, final_alpha_one: bool = False):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() == 0:
            raise ContractViolation("A noise schedule needs at least one beta")
        if not bool(torch.all((betas > 0) & (betas < 1))):
            raise ContractViolation("Every beta must lie strictly between 0 and 1")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)
        self.final_alpha_one = bool(final_alpha_one)
        # index 0 holds alpha_bar(0) == 1
        self._alpha_bar_table = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])

    @classmethod
    def linear(cls, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
               final_alpha_one: bool = False) -> 'NoiseSchedule':
        return cls(torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64), final_alpha_one)

    @classmethod
    def scaled_linear(cls, num_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                      final_alpha_one: bool = False) -> 'NoiseSchedule':
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, num_timesteps, dtype=torch.float64) ** 2
        return cls(betas, final_alpha_one)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def _check_t(self, t: int):
        if not 0 <= int(t) <= self.T:
            raise ContractViolation(f"Timestep {t} outside 0..{self.T}")

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self._alpha_bar_table[int(t)])

    def alpha_bar_prev(self, t_prev: int) -> float:
        self._check_t(t_prev)
        if int(t_prev) == 0 and not self.final_alpha_one:
            return float(self.alphas_cumprod[0])
        return float(self._alpha_bar_table[int(t_prev)])

    def alpha_bar_batch(self, t: torch.Tensor) -> torch.Tensor:
        t = t.long().cpu()
        if bool(torch.any((t < 0) | (t > self.T))):
            raise ContractViolation(f"Timesteps outside 0..{self.T}")
        return self._alpha_bar_table[t]

    def timesteps(self, n_steps: int) -> List[Tuple[int, int]]:
        """Evenly spaced (t, t_prev) pairs, strictly decreasing, ending at t_prev = 0."""
        if not 1 <= int(n_steps) <= self.T:
            raise ContractViolation(f"n_steps must lie in 1..{self.T}, got {n_steps}")
        step = self.T // n_steps
        offset = 2 if 2 + (n_steps - 1) * step <= self.T else 1
        ts = [offset + i * step for i in range(n_steps)][::-1]
        return [(t, ts[i + 1] if i + 1 < len(ts) else 0) for i, t in enumerate(ts)]


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.to(like.device, like.dtype).view(-1, *([1] * (like.ndim - 1)))


def forward_noise(x0: torch.Tensor, t: Union[int, torch.Tensor], schedule: NoiseSchedule,
                  generator: Optional[torch.Generator] = None,
                  noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Closed-form q(x_t | x_0): sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. Returns (x_t, eps)."""
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device='cpu').to(x0.device)
    elif noise.shape != x0.shape:
        raise ShapeError(f"Noise shape {tuple(noise.shape)} does not match sample shape {tuple(x0.shape)}")

    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != x0.shape[0]:
            raise ShapeError("One timestep per batch element is required")
        ab = _broadcast(schedule.alpha_bar_batch(t), x0)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise, noise

    t = int(t)
    ab = schedule.alpha_bar(t)
    if t == 0:
        return x0.clone(), noise
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise, noise


def ddim_sigma(alpha_bar_t: float, alpha_bar_prev: float, eta: float) -> float:
    variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_prev)
    sigma2 = eta ** 2 * max(variance, 0.0)
    if eta > 0:
        sigma2 = max(sigma2, MIN_VARIANCE)
    return math.sqrt(sigma2)


def predict_x0(x_t: torch.Tensor, eps: torch.Tensor, alpha_bar_t: float) -> torch.Tensor:
    return (x_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, std) -> torch.Tensor:
    """Isotropic Gaussian log-density, summed over every dimension but the first."""
    x = x.double()
    mean = mean.double()
    std = torch.as_tensor(std, dtype=torch.float64, device=x.device)
    lp = -((x - mean) ** 2) / (2.0 * std ** 2) - torch.log(std) - 0.5 * LOG_2PI
    return lp.sum(dim=tuple(range(1, x.ndim)))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ToyNoisePredictor(nn.Module):
    """Two-layer MLP noise predictor over flattened pixels, a sinusoidal timestep and a prompt context."""

    def __init__(self, image_shape=(1, 8, 8), context_dim: int = 8, hidden_dim: int = 256, time_dim: int = 32):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.context_dim = context_dim
        self.time_dim = time_dim
        n_pixels = int(np.prod(self.image_shape))
        self.hidden = nn.Linear(n_pixels + time_dim + context_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, n_pixels)
        self.act = nn.SiLU()

    def forward(self, x, t, context=None):
        batch = x.shape[0]
        if context is None:
            context = torch.zeros(batch, self.context_dim, device=x.device, dtype=x.dtype)
        h = torch.cat([x.flatten(1), timestep_embedding(t, self.time_dim).to(x.dtype), context.to(x.dtype)], dim=1)
        return self.out(self.act(self.hidden(h))).view_as(x)


class HashPromptEncoder(nn.Module):
    """Prompt -> fixed pseudo-random context vector seeded by the prompt's sha256."""

    def __init__(self, dim: int = 8):
        super().__init__()
        self.dim = dim

    def forward(self, prompt: str) -> torch.Tensor:
        digest = hashlib.sha256(prompt.encode('utf-8')).digest()
        generator = torch.Generator().manual_seed(int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1))
        return torch.randn(self.dim, generator=generator)


class IdentityCodec:
    frozen = True

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents


class AutoencoderCodec:
    """Frozen pretrained autoencoder: images in [-1,1] (B,3,H,W) <-> scaled latents (B,c_z,h_z,w_z)."""

    frozen = True

    def __init__(self, vae, scaling_factor: Optional[float] = None):
        self.vae = vae.eval()
        self.vae.requires_grad_(False)
        self.scaling_factor = scaling_factor or float(getattr(vae.config, 'scaling_factor', 0.18215))

    @torch.no_grad()
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.vae.encode(images).latent_dist.mean * self.scaling_factor

    @torch.no_grad()
    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(latents / self.scaling_factor).sample.clamp(-1.0, 1.0)


class DenoisingPolicy(nn.Module):
    """Context-conditioned noise predictor plus the schedule that fixes its per-step variance."""

    def __init__(self, network: nn.Module, schedule: NoiseSchedule, sample_shape: Sequence[int],
                 prompt_encoder: Optional[nn.Module] = None, codec=None):
        super().__init__()
        self.network = network
        self.schedule = schedule
        self.sample_shape = tuple(sample_shape)
        self.prompt_encoder = prompt_encoder
        self.codec = codec or IdentityCodec()

    def forward(self, x_t: torch.Tensor, t, context=None) -> torch.Tensor:
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        eps = self.network(x_t, t, context)
        if eps.shape != x_t.shape:
            raise ShapeError(f"Noise prediction shape {tuple(eps.shape)} != sample shape {tuple(x_t.shape)}")
        return eps

    @torch.no_grad()
    def encode_prompt(self, prompt: str) -> torch.Tensor:
        if self.prompt_encoder is None:
            raise ContractViolation("Policy has no prompt encoder")
        return self.prompt_encoder(prompt)

    def encode_prompts(self, prompts: Sequence[str]) -> torch.Tensor:
        cache = {}
        for p in prompts:
            if p not in cache:
                cache[p] = self.encode_prompt(p)
        return torch.stack([cache[p] for p in prompts])


def _step_distribution(policy: DenoisingPolicy, x_t, t: int, t_prev: int, context, eta: float,
                       schedule: Optional[NoiseSchedule] = None):
    schedule = schedule or policy.schedule
    if not int(t) > int(t_prev) >= 0:
        raise ContractViolation(f"Need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation(f"eta must lie in [0, 1], got {eta}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar_prev(t_prev)
    eps = policy(x_t, t, context)
    sigma = ddim_sigma(ab_t, ab_prev, eta)
    x0_hat = predict_x0(x_t, eps, ab_t)
    direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
    mean = math.sqrt(ab_prev) * x0_hat + direction
    return mean, sigma


def reverse_step(policy: DenoisingPolicy, x_t: torch.Tensor, t: int, t_prev: int, context, eta: float,
                 generator: Optional[torch.Generator] = None, *, noise: Optional[torch.Tensor] = None,
                 track_log_prob: bool = True, schedule: Optional[NoiseSchedule] = None):
    """One DDIM step. Returns (x_prev, log_prob) with log_prob None when not tracked."""
    if track_log_prob and eta == 0:
        raise ContractViolation("eta = 0 gives a deterministic step with no density; use eta > 0 to track log-probs")
    mean, sigma = _step_distribution(policy, x_t, t, t_prev, context, eta, schedule)
    if sigma > 0:
        if noise is None:
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device='cpu').to(x_t.device)
        x_prev = mean + sigma * noise
    else:
        x_prev = mean
    log_prob = gaussian_log_prob(x_prev, mean, sigma) if track_log_prob else None
    return x_prev, log_prob


def step_log_prob(policy: DenoisingPolicy, x_t, x_prev, t: int, t_prev: int, context, eta: float,
                  schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    """Differentiable log-density of a stored transition under the policy's current parameters."""
    mean, sigma = _step_distribution(policy, x_t, t, t_prev, context, eta, schedule)
    return gaussian_log_prob(x_prev, mean, sigma)


@dataclass
class TrajectoryStep:
    t: int
    t_prev: int
    x_t: Optional[torch.Tensor]
    x_prev: Optional[torch.Tensor]
    log_prob: float
    context: Optional[torch.Tensor] = None
    eta: float = 1.0


@dataclass
class Trajectory:
    prompt: str
    seed: int
    eta: float
    timesteps: List[Tuple[int, int]]
    states: torch.Tensor
    log_probs: torch.Tensor
    context: Optional[torch.Tensor] = None
    sample_id: int = 0

    def __post_init__(self):
        n = len(self.timesteps)
        if self.states.shape[0] != n + 1 or self.log_probs.shape[0] != n:
            raise ShapeError(f"Trajectory with {n} steps needs {n + 1} states and {n} log-probs")
        ts = [t for t, _ in self.timesteps]
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ContractViolation("Trajectory timesteps must be strictly decreasing")
        if not bool(torch.all(torch.isfinite(self.log_probs))):
            raise ContractViolation("Trajectory log-probs must be finite")

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]

    @property
    def steps(self) -> List[TrajectoryStep]:
        return [TrajectoryStep(t=t, t_prev=t_prev, x_t=self.states[i], x_prev=self.states[i + 1],
                               log_prob=float(self.log_probs[i]), context=self.context, eta=self.eta)
                for i, (t, t_prev) in enumerate(self.timesteps)]

    def to_archive(self, keep_states: bool = True) -> dict:
        return {
            'prompt': self.prompt, 'seed': self.seed, 'eta': self.eta, 'sample_id': self.sample_id,
            'timesteps': list(self.timesteps), 'log_probs': self.log_probs.clone(),
            'states': self.states.clone() if keep_states else None,
            'final': self.final.clone(), 'context': self.context,
        }

    def save(self, path: str, keep_states: bool = True) -> str:
        torch.save(self.to_archive(keep_states), path)
        return path

    @classmethod
    def load(cls, path: str) -> 'Trajectory':
        data = torch.load(path, map_location='cpu', weights_only=False)
        if data['states'] is None:
            raise ContractViolation(f"{path} was saved without per-step states")
        return cls(prompt=data['prompt'], seed=data['seed'], eta=data['eta'], timesteps=[tuple(p) for p in data['timesteps']],
                   states=data['states'], log_probs=data['log_probs'], context=data['context'], sample_id=data['sample_id'])


def derive_sample_seed(global_seed: int, sample_id: int) -> int:
    """Independent RNG stream per trajectory keyed by (global_seed, sample_id)."""
    return int(np.random.SeedSequence([int(global_seed), int(sample_id)]).generate_state(1)[0])


def _batched_noise(generators: Sequence[torch.Generator], shape, like: torch.Tensor) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=torch.float32) for g in generators]).to(like.device, like.dtype)


def _initial_noise(policy: DenoisingPolicy, generators, device, dtype) -> torch.Tensor:
    return torch.stack([torch.randn(policy.sample_shape, generator=g, dtype=torch.float32)
                        for g in generators]).to(device, dtype)


def _policy_device_dtype(policy: DenoisingPolicy):
    param = next(policy.parameters(), None)
    if param is None:
        return torch.device('cpu'), torch.float32
    return param.device, param.dtype


@torch.no_grad()
def sample_batch(policy: DenoisingPolicy, prompts: Sequence[str], seeds: Sequence[int], n_steps: int,
                 eta: float = 1.0, schedule: Optional[NoiseSchedule] = None,
                 sample_ids: Optional[Sequence[int]] = None) -> List[Trajectory]:
    """Sample trajectories with log-probs; sample i draws all its noise from its own seeded generator."""
    if len(prompts) != len(seeds):
        raise ContractViolation("prompts and seeds must have the same length")
    if eta == 0:
        raise ContractViolation("eta = 0 gives a deterministic step with no density; use eta > 0 to track log-probs")
    schedule = schedule or policy.schedule
    pairs = schedule.timesteps(n_steps)
    device, dtype = _policy_device_dtype(policy)
    generators = [torch.Generator().manual_seed(int(s)) for s in seeds]
    contexts = policy.encode_prompts(prompts).to(device) if policy.prompt_encoder is not None else None

    x = _initial_noise(policy, generators, device, dtype)
    states, log_probs = [x], []
    for t, t_prev in pairs:
        noise = _batched_noise(generators, policy.sample_shape, x)
        x, lp = reverse_step(policy, x, t, t_prev, contexts, eta, noise=noise, schedule=schedule)
        states.append(x)
        log_probs.append(lp)

    states = torch.stack(states, dim=1).cpu()
    log_probs = torch.stack(log_probs, dim=1).cpu()
    sample_ids = list(sample_ids) if sample_ids is not None else list(range(len(prompts)))
    return [Trajectory(prompt=prompts[i], seed=int(seeds[i]), eta=eta, timesteps=list(pairs), states=states[i],
                       log_probs=log_probs[i], context=None if contexts is None else contexts[i].cpu(),
                       sample_id=sample_ids[i])
            for i in range(len(prompts))]


def sample_trajectory(policy: DenoisingPolicy, prompt: str, n_steps: int, schedule: Optional[NoiseSchedule] = None,
                      eta: float = 1.0, seed: int = 0) -> Trajectory:
    return sample_batch(policy, [prompt], [seed], n_steps, eta, schedule)[0]


@torch.no_grad()
def sample_images(policy: DenoisingPolicy, prompts: Sequence[str], seeds: Sequence[int], n_steps: int,
                  eta: float = 0.0, schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    """Inference-only sampling (eta may be 0); returns the final samples in model space."""
    schedule = schedule or policy.schedule
    device, dtype = _policy_device_dtype(policy)
    generators = [torch.Generator().manual_seed(int(s)) for s in seeds]
    contexts = policy.encode_prompts(prompts).to(device) if policy.prompt_encoder is not None else None
    x = _initial_noise(policy, generators, device, dtype)
    for t, t_prev in schedule.timesteps(n_steps):
        noise = _batched_noise(generators, policy.sample_shape, x) if eta > 0 else None
        x, _ = reverse_step(policy, x, t, t_prev, contexts, eta, noise=noise, track_log_prob=False, schedule=schedule)
    return x


@torch.no_grad()
def recompute_logprob(policy: DenoisingPolicy, step: TrajectoryStep, schedule: Optional[NoiseSchedule] = None) -> float:
    if step.x_t is None or step.x_prev is None:
        raise ContractViolation("Trajectory step is missing its stored states")
    device, dtype = _policy_device_dtype(policy)
    context = None if step.context is None else step.context.unsqueeze(0).to(device)
    lp = step_log_prob(policy, step.x_t.unsqueeze(0).to(device, dtype), step.x_prev.unsqueeze(0).to(device, dtype),
                       step.t, step.t_prev, context, step.eta, schedule)
    return float(lp[0])


def to_image_array(sample: torch.Tensor) -> np.ndarray:
    """CxHxW tensor in [-1,1] -> HxWxC float64 array in [0,1]."""
    if sample.ndim != 3:
        raise ShapeError(f"Expected a CxHxW sample, got shape {tuple(sample.shape)}")
    return ((sample.detach().double().cpu() + 1.0) / 2.0).clamp(0.0, 1.0).permute(1, 2, 0).numpy()


@dataclass
class PretrainResult:
    mse_before: float
    mse_after: float
    losses: List[float] = field(default_factory=list)

    @property
    def reduction(self) -> float:
        return 1.0 - self.mse_after / self.mse_before if self.mse_before > 0 else 0.0


def _denoising_mse(policy, data, t, eps, contexts) -> float:
    x_t, _ = forward_noise(data, t, policy.schedule, noise=eps)
    with torch.no_grad():
        return float(F.mse_loss(policy(x_t, t, contexts), eps))


def pretrain_denoiser(policy: DenoisingPolicy, data: torch.Tensor, prompts: Sequence[str] = ('painting', 'drawing', 'art'),
                      steps: int = 3000, lr: float = 1e-3, batch_size: int = 128, seed: int = 0,
                      eval_size: int = 512) -> PretrainResult:
    """Supervised epsilon-prediction training of the base network, before any adapters are attached."""
    generator = torch.Generator().manual_seed(seed)
    device, dtype = _policy_device_dtype(policy)
    data = data.to(device, dtype)
    T = policy.schedule.T
    contexts = policy.encode_prompts(list(prompts)).to(device, dtype) if policy.prompt_encoder is not None else None

    def draw(n):
        idx = torch.randint(0, data.shape[0], (n,), generator=generator)
        t = torch.randint(1, T + 1, (n,), generator=generator)
        eps = torch.randn((n,) + tuple(data.shape[1:]), generator=generator).to(device, dtype)
        ctx = None if contexts is None else contexts[torch.randint(0, contexts.shape[0], (n,), generator=generator)]
        return data[idx], t, eps, ctx

    eval_batch = draw(eval_size)
    mse_before = _denoising_mse(policy, *eval_batch)
    optimizer = torch.optim.Adam(policy.network.parameters(), lr=lr)
    losses = []
    policy.train()
    start = time.time()
    for _ in tqdm(range(steps), desc='Pretrain denoiser', leave=False):
        x0, t, eps, ctx = draw(batch_size)
        x_t, _ = forward_noise(x0, t, policy.schedule, noise=eps)
        loss = F.mse_loss(policy(x_t, t, ctx), eps)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    policy.eval()
    mse_after = _denoising_mse(policy, *eval_batch)
    logger.info(f"Denoiser pretrained in {time.time() - start:.2f} seconds: mse {mse_before:.4f} -> {mse_after:.4f}")
    return PretrainResult(mse_before=mse_before, mse_after=mse_after, losses=losses)


def build_toy_policy(config: DiffusionConfig) -> DenoisingPolicy:
    shape = (config.channels, config.image_size, config.image_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        network = ToyNoisePredictor(shape, context_dim=config.context_dim, hidden_dim=config.hidden_dim)
    return DenoisingPolicy(network, config.build_schedule(), shape, prompt_encoder=HashPromptEncoder(config.context_dim))


class UnetNoisePredictor(nn.Module):
    def __init__(self, unet):
        super().__init__()
        self.unet = unet

    def forward(self, x, t, context=None):
        # pretrained UNets index timesteps from 0
        return self.unet(x, t - 1, encoder_hidden_states=context).sample


class ClipPromptEncoder(nn.Module):
    def __init__(self, tokenizer, text_encoder):
        super().__init__()
        self.tokenizer = tokenizer
        self.text_encoder = text_encoder.eval()
        self.text_encoder.requires_grad_(False)

    @torch.no_grad()
    def forward(self, prompt: str) -> torch.Tensor:
        ids = self.tokenizer(prompt, padding='max_length', max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors='pt').input_ids
        param = next(self.text_encoder.parameters())
        return self.text_encoder(ids.to(param.device))[0][0]


def load_pretrained_policy(model_id: str = 'stabilityai/stable-diffusion-2-base', device: Optional[str] = None,
                           final_alpha_one: bool = False) -> DenoisingPolicy:
    """Frozen pretrained latent text-to-image UNet with its text encoder and autoencoder."""
    device = device or default_device()
    start = time.time()
    logger.info(f"Loading pretrained diffusion model {model_id}")
    try:
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        unet = UNet2DConditionModel.from_pretrained(model_id, subfolder='unet').to(device)
        vae = AutoencoderKL.from_pretrained(model_id, subfolder='vae').to(device)
        tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder='tokenizer')
        text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder='text_encoder').to(device)
    except Exception as e:
        logger.error(f"Failed to load {model_id}: {e}")
        raise BackendUnavailableError(f"Could not load pretrained diffusion model {model_id}: {e}") from e
    logger.info(f"Pretrained diffusion model loaded in {time.time() - start:.2f} seconds")

    unet.requires_grad_(False)
    schedule = NoiseSchedule.scaled_linear(1000, 0.00085, 0.012, final_alpha_one=final_alpha_one)
    latent_size = int(unet.config.sample_size)
    shape = (int(unet.config.in_channels), latent_size, latent_size)
    return DenoisingPolicy(UnetNoisePredictor(unet), schedule, shape,
                           prompt_encoder=ClipPromptEncoder(tokenizer, text_encoder), codec=AutoencoderCodec(vae))


def build_policy(config: DiffusionConfig) -> DenoisingPolicy:
    if config.policy == 'toy':
        return build_toy_policy(config)
    if config.policy.startswith('pretrained:'):
        return load_pretrained_policy(config.policy.split(':', 1)[1], final_alpha_one=config.final_alpha_one)
    raise ConfigError(f"Unknown diffusion.policy: {config.policy} (expected 'toy' or 'pretrained:<model id>')")


class DiffusionImageSampler:
    """(prompt, seed) -> HxWx3 image in [0,1]; the generator interface used by evaluation."""

    def __init__(self, policy: DenoisingPolicy, n_steps: int = 30, eta: float = 1.0):
        self.policy = policy
        self.n_steps = n_steps
        self.eta = eta

    def __call__(self, prompt: str, seed: int) -> np.ndarray:
        sample = sample_images(self.policy, [prompt], [seed], self.n_steps, self.eta)
        return to_image_array(self.policy.codec.decode(sample)[0])
