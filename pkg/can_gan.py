"""Creative Adversarial Network baseline: builders, losses, gradient penalty and the training loop."""
import itertools
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import autograd
from torchvision.utils import save_image
from tqdm import tqdm

from errors import ConfigError, ContractViolation, NonFiniteLossError, ShapeError
from run_storage import save_checkpoint
from style_classifiers import EPS_PROB, style_ambiguity_from_probs, style_classification_loss_from_probs

logger = logging.getLogger(__name__)

FULL_SIZE_DIMS = (256, 512)
GENERATOR_PARAMS_512 = 48_014_784
DISCRIMINATOR_PARAMS_512 = 20_115_932


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 100
    image_dim: int = 512
    base_channels: int = 2048
    leaky_slope: float = 0.2
    toy: bool = False

    def __post_init__(self):
        if self.toy:
            if not _is_power_of_two(self.image_dim) or self.image_dim < 8:
                raise ConfigError(f"Toy image_dim must be a power of two >= 8, got {self.image_dim}")
        elif self.image_dim not in FULL_SIZE_DIMS:
            raise ConfigError(f"Unsupported image_dim {self.image_dim}; expected one of {FULL_SIZE_DIMS}")
        if self.base_channels % (2 ** self.n_doublings) != 0:
            raise ConfigError("base_channels must stay an integer after every halving")

    @property
    def n_doublings(self) -> int:
        # 4 -> image_dim / 2 by halving-channel layers, then one final layer to 3 channels
        return int(math.log2(self.image_dim)) - 3

    def layer_plan(self) -> List[Tuple[int, int, int]]:
        """(spatial, channels) after each layer as (h, w, c), starting at the 4x4 projection."""
        plan = [(4, 4, self.base_channels)]
        size, channels = 4, self.base_channels
        for _ in range(self.n_doublings):
            size, channels = size * 2, channels // 2
            plan.append((size, size, channels))
        plan.append((size * 2, size * 2, 3))
        return plan


@dataclass(frozen=True)
class DiscriminatorSpec:
    image_dim: int = 512
    n_styles: int = 27
    first_channels: int = 32
    doubling_layers: int = 5
    constant_layers: int = 2
    first_layer_norm: bool = False
    batch_norm: bool = True
    head_widths: Tuple[int, ...] = (1024, 512)
    dropout: float = 0.5
    leaky_slope: float = 0.2
    toy: bool = False

    def __post_init__(self):
        if self.toy:
            if not _is_power_of_two(self.image_dim) or self.image_dim < 8:
                raise ConfigError(f"Toy image_dim must be a power of two >= 8, got {self.image_dim}")
        elif self.image_dim not in FULL_SIZE_DIMS:
            raise ConfigError(f"Unsupported image_dim {self.image_dim}; expected one of {FULL_SIZE_DIMS}")
        if self.n_styles < 2:
            raise ConfigError("n_styles must be >= 2")
        if self.final_size < 1:
            raise ConfigError(f"{1 + self.doubling_layers + self.constant_layers} halvings do not fit a {self.image_dim} image")

    @classmethod
    def table_matched(cls, image_dim: int = 512, n_styles: int = 27) -> 'DiscriminatorSpec':
        """Four doubling convs with batch norm on every conv; reproduces the published 20,115,932 at 512."""
        return cls(image_dim=image_dim, n_styles=n_styles, doubling_layers=4, first_layer_norm=True)

    @property
    def n_halvings(self) -> int:
        return 1 + self.doubling_layers + self.constant_layers

    @property
    def final_size(self) -> int:
        return self.image_dim // (2 ** self.n_halvings)

    @property
    def final_channels(self) -> int:
        return self.first_channels * 2 ** self.doubling_layers

    @property
    def flatten_dim(self) -> int:
        return self.final_size * self.final_size * self.final_channels

    def layer_plan(self) -> List[Tuple[int, int, int]]:
        plan = []
        size, channels = self.image_dim // 2, self.first_channels
        plan.append((size, size, channels))
        for _ in range(self.doubling_layers):
            size, channels = size // 2, channels * 2
            plan.append((size, size, channels))
        for _ in range(self.constant_layers):
            size //= 2
            plan.append((size, size, channels))
        return plan


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        layers: List[nn.Module] = [
            nn.ConvTranspose2d(spec.noise_dim, spec.base_channels, 4, 1, 0, bias=False),
            nn.BatchNorm2d(spec.base_channels),
            nn.LeakyReLU(spec.leaky_slope),
        ]
        channels = spec.base_channels
        for _ in range(spec.n_doublings):
            layers += [
                nn.ConvTranspose2d(channels, channels // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(channels // 2),
                nn.LeakyReLU(spec.leaky_slope),
            ]
            channels //= 2
        layers += [nn.ConvTranspose2d(channels, 3, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 2:
            z = z[:, :, None, None]
        if z.shape[1] != self.spec.noise_dim:
            raise ShapeError(f"Expected noise of dim {self.spec.noise_dim}, got {z.shape[1]}")
        return self.net(z)

    def sample_images(self, z: torch.Tensor) -> torch.Tensor:
        """N x H x W x 3 images in (-1, 1)."""
        return self.forward(z).permute(0, 2, 3, 1)

    def intermediate_shapes(self, batch: int = 1) -> List[Tuple[int, int, int]]:
        """(h, w, c) after every transpose conv, measured by a forward pass."""
        shapes = []
        x = torch.zeros(batch, self.spec.noise_dim, 1, 1)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            for layer in self.net:
                x = layer(x)
                if isinstance(layer, nn.ConvTranspose2d):
                    shapes.append((x.shape[2], x.shape[3], x.shape[1]))
        self.train(was_training)
        return shapes


class Discriminator(nn.Module):
    """Shared conv stack with a real/fake head (one logit) and a style head (n_styles logits)."""

    def __init__(self, spec: DiscriminatorSpec, labels: Optional[Sequence[str]] = None):
        super().__init__()
        self.spec = spec
        self.image_dim = spec.image_dim
        self.labels = tuple(labels) if labels is not None else None
        if self.labels is not None and len(self.labels) != spec.n_styles:
            raise ConfigError(f"{len(self.labels)} labels for a {spec.n_styles}-way style head")

        def block(c_in, c_out, norm):
            layers = [nn.Conv2d(c_in, c_out, 4, 2, 1, bias=False)]
            if norm and spec.batch_norm:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(spec.leaky_slope))
            return layers

        layers = block(3, spec.first_channels, spec.first_layer_norm)
        channels = spec.first_channels
        for _ in range(spec.doubling_layers):
            layers += block(channels, channels * 2, True)
            channels *= 2
        for _ in range(spec.constant_layers):
            layers += block(channels, channels, True)
        self.features = nn.Sequential(*layers, nn.Flatten())
        self.binary_head = nn.Linear(spec.flatten_dim, 1)

        head: List[nn.Module] = []
        width = spec.flatten_dim
        for hidden in spec.head_widths:
            head += [nn.Linear(width, hidden), nn.LeakyReLU(spec.leaky_slope), nn.Dropout(spec.dropout)]
            width = hidden
        head.append(nn.Linear(width, spec.n_styles))
        self.style_head = nn.Sequential(*head)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.image_dim or x.shape[3] != self.image_dim:
            raise ShapeError(f"Discriminator expects (B, 3, {self.image_dim}, {self.image_dim}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        self._check(x)
        h = self.features(x)
        return self.binary_head(h).squeeze(-1), self.style_head(h)

    def critic(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def style_logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.style_head(self.features(x))

    def intermediate_shapes(self) -> List[Tuple[int, int, int]]:
        shapes = []
        x = torch.zeros(1, 3, self.image_dim, self.image_dim)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            for layer in self.features:
                x = layer(x)
                if isinstance(layer, nn.Conv2d):
                    shapes.append((x.shape[2], x.shape[3], x.shape[1]))
        self.train(was_training)
        return shapes


def build_generator(spec: GeneratorSpec) -> Generator:
    return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec, labels: Optional[Sequence[str]] = None) -> Discriminator:
    return Discriminator(spec, labels)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_count_report(generator: Generator, discriminator: Discriminator) -> Dict[str, int]:
    g, d = count_parameters(generator), count_parameters(discriminator)
    report = {'generator': g, 'discriminator': d}
    if generator.spec.image_dim == 512 and not generator.spec.toy:
        report['generator_delta'] = g - GENERATOR_PARAMS_512
    if discriminator.spec.image_dim == 512 and not discriminator.spec.toy:
        report['discriminator_delta'] = d - DISCRIMINATOR_PARAMS_512
    return report


@dataclass
class CanLossTerms:
    d_real: torch.Tensor
    d_fake: torch.Tensor
    g_adversarial: torch.Tensor
    style_classification: torch.Tensor
    style_ambiguity: torch.Tensor
    style_weight: float = 1.0
    ambiguity_weight: float = 1.0

    @property
    def loss_d(self) -> torch.Tensor:
        return self.d_real + self.d_fake + self.style_weight * self.style_classification

    @property
    def loss_g(self) -> torch.Tensor:
        return self.g_adversarial + self.ambiguity_weight * self.style_ambiguity


def can_loss_terms(d_real_bin, d_fake_bin, d_real_style, real_labels, c_fake_style,
                   style_weight: float = 1.0, ambiguity_weight: float = 1.0) -> CanLossTerms:
    """All inputs are probabilities: D(x), D(G(z)), style posteriors on real and generated images."""
    d_real_bin, d_fake_bin = torch.as_tensor(d_real_bin), torch.as_tensor(d_fake_bin)
    d_real_style, c_fake_style = torch.as_tensor(d_real_style), torch.as_tensor(c_fake_style)
    real_labels = torch.as_tensor(real_labels)
    if d_real_bin.shape != d_fake_bin.shape or d_real_bin.ndim != 1:
        raise ShapeError(f"Real and fake discriminator outputs must both be (B,), got {tuple(d_real_bin.shape)} "
                         f"and {tuple(d_fake_bin.shape)}")
    if d_real_style.ndim != 2 or d_real_style.shape[0] != real_labels.shape[0]:
        raise ShapeError("Real style posteriors must be (B, N) with one label per row")
    if c_fake_style.ndim != 2 or c_fake_style.shape[1] != d_real_style.shape[1]:
        raise ShapeError("Generated style posteriors must have the same class count as the real ones")

    return CanLossTerms(
        d_real=-torch.log(d_real_bin.clamp_min(EPS_PROB)).mean(),
        d_fake=-torch.log((1.0 - d_fake_bin).clamp_min(EPS_PROB)).mean(),
        g_adversarial=-torch.log(d_fake_bin.clamp_min(EPS_PROB)).mean(),
        style_classification=style_classification_loss_from_probs(d_real_style, real_labels).mean(),
        style_ambiguity=style_ambiguity_from_probs(c_fake_style).mean(),
        style_weight=style_weight,
        ambiguity_weight=ambiguity_weight,
    )


def can_losses(d_real_bin, d_fake_bin, d_real_style, real_labels, c_fake_style,
               style_weight: float = 1.0, ambiguity_weight: float = 1.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """(loss_D, loss_G): loss_D = adversarial-D + L_SL, loss_G = adversarial-G + L_SA."""
    terms = can_loss_terms(d_real_bin, d_fake_bin, d_real_style, real_labels, c_fake_style, style_weight, ambiguity_weight)
    return terms.loss_d, terms.loss_g


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real_batch: torch.Tensor, fake_batch: torch.Tensor,
                     gp_lambda: float = 10.0, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """gp_lambda * E[(||grad_x D(x_hat)||_2 - 1)^2] over random interpolates of real and fake.

    `critic` must return the unbounded score. For the CAN discriminator that is the binary logit
    (`Discriminator.critic`), so the penalty sits on the pre-sigmoid output while the adversarial terms
    stay the cross-entropy of its sigmoid.
    """
    if real_batch.shape != fake_batch.shape:
        raise ShapeError(f"Real batch {tuple(real_batch.shape)} and fake batch {tuple(fake_batch.shape)} differ")
    alpha_shape = (real_batch.shape[0],) + (1,) * (real_batch.ndim - 1)
    alpha = torch.rand(alpha_shape, generator=generator, dtype=real_batch.dtype).to(real_batch.device)
    interpolates = (alpha * real_batch + (1.0 - alpha) * fake_batch).detach().requires_grad_(True)
    out = critic(interpolates)
    if isinstance(out, tuple):
        out = out[0]
    gradients = autograd.grad(outputs=out, inputs=interpolates, grad_outputs=torch.ones_like(out),
                              create_graph=True, retain_graph=True, only_inputs=True)[0]
    gradients = gradients.reshape(gradients.shape[0], -1)
    return gp_lambda * ((gradients.norm(2, dim=1) - 1.0) ** 2).mean()


@dataclass
class CanTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    adam_epsilon: float = 1e-8
    gradient_penalty: bool = True
    gp_lambda: float = 10.0
    dataset: str = 'full'
    image_dim: int = 256
    noise_dim: int = 100
    style_weight: float = 1.0
    ambiguity_weight: float = 1.0
    max_steps: int = 0
    sample_grid: int = 16
    style_head_steps: int = 1000
    toy: bool = False
    toy_base_channels: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ('epochs', 'batch_size', 'learning_rate', 'adam_epsilon', 'noise_dim'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"can.{name} must be positive")
        if self.gp_lambda < 0 or self.weight_decay < 0 or self.max_steps < 0:
            raise ConfigError("can.gp_lambda, can.weight_decay and can.max_steps must be >= 0")
        if self.dataset not in ('full', 'mediums', 'toy'):
            raise ConfigError(f"Unknown CAN dataset: {self.dataset}")

    def generator_spec(self) -> GeneratorSpec:
        if self.toy:
            return GeneratorSpec(self.noise_dim, self.image_dim, base_channels=self.toy_base_channels, toy=True)
        return GeneratorSpec(self.noise_dim, self.image_dim)

    def discriminator_spec(self, n_styles: int) -> DiscriminatorSpec:
        if self.toy:
            return DiscriminatorSpec(image_dim=self.image_dim, n_styles=n_styles, first_channels=8, doubling_layers=1,
                                     constant_layers=0, batch_norm=False, head_widths=(64, 32), dropout=0.1, toy=True)
        return DiscriminatorSpec(image_dim=self.image_dim, n_styles=n_styles)


def can_grid(base: Optional[CanTrainConfig] = None) -> List[CanTrainConfig]:
    """{256, 512} x {full, mediums} x {128, 256} x {GP, no GP}: sixteen runs."""
    base = base or CanTrainConfig()
    return [replace(base, image_dim=dim, dataset=dataset, batch_size=batch, gradient_penalty=gp)
            for dim, dataset, batch, gp in itertools.product((256, 512), ('full', 'mediums'), (128, 256), (True, False))]


@dataclass
class StyleImageTensors:
    images: torch.Tensor
    labels: torch.Tensor
    label_set: Tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"Expected (N, 3, H, W) images, got {tuple(self.images.shape)}")
        if self.labels.shape[0] != self.images.shape[0]:
            raise ShapeError("One label per image is required")
        if int(self.labels.max()) >= len(self.label_set) or int(self.labels.min()) < 0:
            raise ContractViolation("Labels must index into label_set")

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class CanRunResult:
    generator: Generator
    discriminator: Discriminator
    history: pd.DataFrame
    checkpoint: Optional[str] = None
    parameter_counts: Dict[str, int] = field(default_factory=dict)


def _check_finite(values: Dict[str, torch.Tensor], step: int, epoch: int):
    for name, value in values.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"Non-finite CAN loss {name}", {'step': step, 'epoch': epoch, name: float(value)})


def train_can(config: CanTrainConfig, dataset: StyleImageTensors, out_dir: Optional[str] = None,
              digest: str = '', external_classifier: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
              generator: Optional[Generator] = None, discriminator: Optional[Discriminator] = None) -> CanRunResult:
    """Alternating D / G updates. `external_classifier` (images -> style logits) replaces D's style head for L_SA."""
    torch.manual_seed(config.seed)
    rng = torch.Generator().manual_seed(config.seed)
    if dataset.images.shape[-1] != config.image_dim:
        raise ShapeError(f"Dataset images are {dataset.images.shape[-1]}px, config expects {config.image_dim}px")
    n_styles = len(dataset.label_set)
    G = generator or build_generator(config.generator_spec())
    D = discriminator or build_discriminator(config.discriminator_spec(n_styles), dataset.label_set)
    if D.spec.n_styles != n_styles:
        raise ConfigError(f"Discriminator has {D.spec.n_styles} styles, dataset has {n_styles}")

    betas = (config.beta1, config.beta2)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_epsilon,
                             weight_decay=config.weight_decay)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_epsilon,
                             weight_decay=config.weight_decay)
    fixed_noise = torch.randn(config.sample_grid, config.noise_dim, generator=rng)

    steps_per_epoch = max(1, math.ceil(len(dataset) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)

    rows = []
    start = time.time()
    G.train()
    D.train()
    for step in tqdm(range(total_steps), desc='CAN steps', leave=False):
        epoch = step // steps_per_epoch
        idx = torch.randint(0, len(dataset), (config.batch_size,), generator=rng)
        real, labels = dataset.images[idx], dataset.labels[idx]
        z = torch.randn(config.batch_size, config.noise_dim, generator=rng)

        # discriminator update
        fake = G(z).detach()
        real_logit, real_style = D(real)
        fake_logit, _ = D(fake)
        terms = can_loss_terms(torch.sigmoid(real_logit), torch.sigmoid(fake_logit), F.softmax(real_style, dim=-1),
                               labels, F.softmax(real_style, dim=-1).detach(), config.style_weight, config.ambiguity_weight)
        loss_d = terms.loss_d
        gp = torch.zeros(())
        if config.gradient_penalty:
            # penalty on the logit; the cross-entropy terms above see its sigmoid
            gp = gradient_penalty(D.critic, real, fake, config.gp_lambda, generator=rng)
            loss_d = loss_d + gp
        _check_finite({'loss_d': loss_d}, step, epoch)
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        # generator update
        fake = G(z)
        fake_logit, fake_style = D(fake)
        if external_classifier is not None:
            fake_style = external_classifier(fake)
        g_terms = can_loss_terms(torch.sigmoid(real_logit.detach()), torch.sigmoid(fake_logit),
                                 F.softmax(real_style.detach(), dim=-1), labels, F.softmax(fake_style, dim=-1),
                                 config.style_weight, config.ambiguity_weight)
        loss_g = g_terms.loss_g
        _check_finite({'loss_g': loss_g}, step, epoch)
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        rows.append({
            'step': step, 'epoch': epoch,
            'loss_d': float(loss_d), 'loss_g': float(loss_g),
            'd_real': float(terms.d_real), 'd_fake': float(terms.d_fake),
            'g_adversarial': float(g_terms.g_adversarial),
            'style_classification': float(terms.style_classification),
            'style_ambiguity': float(g_terms.style_ambiguity),
            'gradient_penalty': float(gp),
        })

        epoch_done = (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps
        if out_dir and epoch_done:
            pd.DataFrame(rows).to_csv(os.path.join(out_dir, 'can_losses.csv'), index=False)
            G.eval()
            with torch.no_grad():
                grid = (G(fixed_noise) + 1.0) / 2.0
            G.train()
            save_image(grid, os.path.join(out_dir, f"samples_epoch_{epoch:03d}.png"), nrow=int(math.sqrt(config.sample_grid)) or 1)

    logger.info(f"CAN training finished {total_steps} steps in {time.time() - start:.2f} seconds")
    G.eval()
    D.eval()
    history = pd.DataFrame(rows)
    counts = parameter_count_report(G, D)
    checkpoint = None
    if out_dir:
        checkpoint = save_checkpoint(os.path.join(out_dir, 'can.pt'),
                                     {'generator': G.state_dict(), 'discriminator': D.state_dict()}, digest,
                                     metadata={'config': asdict(config), 'labels': list(dataset.label_set),
                                               'generator_spec': asdict(G.spec), 'discriminator_spec': asdict(D.spec),
                                               'parameter_counts': counts})
    return CanRunResult(G, D, history, checkpoint, counts)


def pretrain_style_head(discriminator: Discriminator, dataset: StyleImageTensors, steps: int = 1000,
                        batch_size: int = 32, lr: float = 0.001, seed: int = 0) -> List[float]:
    """Train the conv stack and style head on labeled real images only (L_SL)."""
    rng = torch.Generator().manual_seed(seed)
    params = list(discriminator.features.parameters()) + list(discriminator.style_head.parameters())
    optimizer = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.99), eps=1e-8)
    discriminator.train()
    losses = []
    for step in tqdm(range(steps), desc='Style head', leave=False):
        idx = torch.randint(0, len(dataset), (batch_size,), generator=rng)
        logits = discriminator.style_logits(dataset.images[idx])
        loss = F.cross_entropy(logits, dataset.labels[idx])
        if not torch.isfinite(loss):
            raise NonFiniteLossError("Non-finite style-head loss", {'step': step, 'loss': float(loss)})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    discriminator.eval()
    return losses


@torch.no_grad()
def style_accuracy(discriminator: Discriminator, dataset: StyleImageTensors) -> float:
    discriminator.eval()
    predictions = discriminator.style_logits(dataset.images).argmax(dim=-1)
    return float((predictions == dataset.labels).float().mean())


def load_can_checkpoint(path: str) -> Tuple[Generator, Discriminator, dict]:
    from run_storage import load_checkpoint

    payload = load_checkpoint(path)
    meta = payload['metadata']
    G = build_generator(GeneratorSpec(**meta['generator_spec']))
    d_spec = dict(meta['discriminator_spec'])
    d_spec['head_widths'] = tuple(d_spec['head_widths'])
    D = build_discriminator(DiscriminatorSpec(**d_spec), meta.get('labels'))
    G.load_state_dict(payload['tensors']['generator'])
    D.load_state_dict(payload['tensors']['discriminator'])
    return G.eval(), D.eval(), meta


def load_discriminator(path: str) -> Discriminator:
    """Accepts a full CAN checkpoint or a `train-disc` style-head checkpoint."""
    from run_storage import load_checkpoint

    payload = load_checkpoint(path)
    meta = payload['metadata']
    d_spec = dict(meta['discriminator_spec'])
    d_spec['head_widths'] = tuple(d_spec['head_widths'])
    D = build_discriminator(DiscriminatorSpec(**d_spec), meta.get('labels'))
    D.load_state_dict(payload['tensors']['discriminator'])
    return D.eval()


class CanImageSampler:
    """seed -> HxWx3 image in [0,1]; the prompt is ignored (the generator is unconditional)."""

    def __init__(self, generator: Generator):
        self.generator = generator.eval()

    @torch.no_grad()
    def __call__(self, prompt: str, seed: int) -> np.ndarray:
        z = torch.randn(1, self.generator.spec.noise_dim, generator=torch.Generator().manual_seed(int(seed)))
        image = (self.generator(z)[0] + 1.0) / 2.0
        return image.clamp(0.0, 1.0).permute(1, 2, 0).double().numpy()
