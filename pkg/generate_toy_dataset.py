import argparse
import logging
import os

import numpy as np
import torch

from backends import to_pil

logger = logging.getLogger(__name__)

# Synthetic "styles": each family is a distinct pixel statistic a small classifier can learn
STYLE_FAMILIES = ('bright', 'dark', 'stripes', 'checker', 'gradient')


def _bright(rng, size):
    return np.clip(0.8 + 0.08 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def _dark(rng, size):
    return np.clip(0.2 + 0.08 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def _stripes(rng, size):
    period = int(rng.integers(2, max(3, size // 4) + 1))
    rows = (np.arange(size) // period) % 2
    base = np.repeat(rows[:, None], size, axis=1).astype(np.float64)
    color = rng.uniform(0.3, 1.0, size=3)
    return np.clip(base[:, :, None] * color + 0.03 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def _checker(rng, size):
    cell = int(rng.integers(2, max(3, size // 4) + 1))
    idx = np.arange(size) // cell
    base = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    return np.clip(base[:, :, None] * rng.uniform(0.5, 1.0) + 0.03 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def _gradient(rng, size):
    ramp = np.linspace(0.0, 1.0, size)
    base = ramp[None, :] if rng.random() < 0.5 else ramp[:, None]
    base = np.broadcast_to(base, (size, size))
    return np.clip(base[:, :, None] * rng.uniform(0.6, 1.0, size=3), 0.0, 1.0)


PAINTERS = {
    'bright': _bright,
    'dark': _dark,
    'stripes': _stripes,
    'checker': _checker,
    'gradient': _gradient,
}


def generate_style_image(style, rng, size=16):
    """HxWx3 image in [0, 1] drawn from one style family."""
    if style not in PAINTERS:
        raise ValueError(f"Unknown toy style: {style}")
    return PAINTERS[style](rng, size)


def toy_style_tensors(styles=('bright', 'dark'), per_class=64, size=16, seed=0):
    """(N, 3, size, size) tensors in [-1, 1] and integer labels, without touching disk."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, style in enumerate(styles):
        for _ in range(per_class):
            images.append(generate_style_image(style, rng, size))
            labels.append(label)
    array = np.stack(images).transpose(0, 3, 1, 2) * 2.0 - 1.0
    return torch.from_numpy(array).float(), torch.tensor(labels, dtype=torch.long)


def toy_denoising_images(n=2048, size=8, channels=1, seed=0):
    """Training data for the toy denoiser: flat brightness levels plus horizontal / vertical ramps, in [-1, 1]."""
    rng = np.random.default_rng(seed)
    levels = rng.uniform(-0.9, 0.9, size=n)
    slopes = rng.uniform(-0.5, 0.5, size=n)
    ramp = np.linspace(-1.0, 1.0, size)
    horizontal = rng.random(n) < 0.5
    images = np.empty((n, channels, size, size))
    for i in range(n):
        field = ramp[None, :] if horizontal[i] else ramp[:, None]
        images[i] = np.clip(levels[i] + slopes[i] * np.broadcast_to(field, (size, size)), -1.0, 1.0)
    return torch.from_numpy(images).float()


def write_toy_dataset(root, styles=STYLE_FAMILIES, per_class=12, size=16, seed=0):
    """root/<style>/<nnnn>.png for every style family."""
    rng = np.random.default_rng(seed)
    for style in styles:
        directory = os.path.join(root, style)
        os.makedirs(directory, exist_ok=True)
        for i in range(per_class):
            to_pil(generate_style_image(style, rng, size)).save(os.path.join(directory, f"{i:04d}.png"))
    logger.info(f"Wrote {len(styles) * per_class} toy images under {root}")
    return root


def main(argv=None):
    parser = argparse.ArgumentParser(description='Write a synthetic style dataset (root/<style>/*.png).')
    parser.add_argument('root')
    parser.add_argument('--styles', nargs='+', default=list(STYLE_FAMILIES), choices=list(STYLE_FAMILIES))
    parser.add_argument('--per-class', type=int, default=12)
    parser.add_argument('--size', type=int, default=16)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s %(message)s')
    write_toy_dataset(args.root, tuple(args.styles), args.per_class, args.size, args.seed)
    print(f"Toy dataset written to {args.root}")


if __name__ == '__main__':
    main()
