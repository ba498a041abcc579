import math
import os

import numpy as np
import pandas as pd
import pytest
import torch

from can_gan import (DISCRIMINATOR_PARAMS_512, GENERATOR_PARAMS_512, CanImageSampler, CanTrainConfig, Discriminator,
                     DiscriminatorSpec, Generator, GeneratorSpec, StyleImageTensors, build_discriminator,
                     build_generator, can_grid, can_loss_terms,
                     can_losses, count_parameters, gradient_penalty, load_can_checkpoint, load_discriminator,
                     parameter_count_report, pretrain_style_head, style_accuracy, train_can)
from errors import ConfigError, ContractViolation, ShapeError
from generate_toy_dataset import toy_style_tensors

TOY_LABELS = ('bright', 'dark')


def toy_config(**kwargs):
    defaults = dict(toy=True, dataset='toy', image_dim=16, batch_size=8, epochs=1, max_steps=5)
    defaults.update(kwargs)
    return CanTrainConfig(**defaults)


def toy_tensors(seed=0, per_class=64):
    images, labels = toy_style_tensors(TOY_LABELS, per_class=per_class, size=16, seed=seed)
    return StyleImageTensors(images, labels, TOY_LABELS)


def test_generator_layer_plan_at_256():
    assert GeneratorSpec(image_dim=256).layer_plan() == [
        (4, 4, 2048), (8, 8, 1024), (16, 16, 512), (32, 32, 256), (64, 64, 128), (128, 128, 64), (256, 256, 3)]


def test_discriminator_layer_plans_at_512():
    default = DiscriminatorSpec()
    assert default.layer_plan() == [(256, 256, 32), (128, 128, 64), (64, 64, 128), (32, 32, 256), (16, 16, 512),
                                    (8, 8, 1024), (4, 4, 1024), (2, 2, 1024)]
    assert default.flatten_dim == 4096
    matched = DiscriminatorSpec.table_matched(512, 27)
    assert matched.layer_plan() == [(256, 256, 32), (128, 128, 64), (64, 64, 128), (32, 32, 256), (16, 16, 512),
                                    (8, 8, 512), (4, 4, 512)]
    assert matched.flatten_dim == 8192


def test_parameter_counts_at_512():
    with torch.device('meta'):
        generator = Generator(GeneratorSpec(image_dim=512))
        default = Discriminator(DiscriminatorSpec(image_dim=512, n_styles=27))
        matched = Discriminator(DiscriminatorSpec.table_matched(512, 27))
    assert count_parameters(generator) == GENERATOR_PARAMS_512 == 48_014_784
    assert count_parameters(matched) == DISCRIMINATOR_PARAMS_512 == 20_115_932
    assert count_parameters(default) == 49_475_996

    report = parameter_count_report(generator, default)
    assert report['generator_delta'] == 0
    assert report['discriminator_delta'] == 49_475_996 - 20_115_932
    assert parameter_count_report(generator, matched)['discriminator_delta'] == 0


def test_toy_shapes_follow_layer_plan():
    config = toy_config()
    generator = build_generator(config.generator_spec())
    assert generator.intermediate_shapes() == generator.spec.layer_plan() == [(4, 4, 64), (8, 8, 32), (16, 16, 3)]
    discriminator = build_discriminator(config.discriminator_spec(2), TOY_LABELS)
    assert discriminator.labels == tuple(TOY_LABELS)
    assert discriminator.intermediate_shapes() == discriminator.spec.layer_plan() == [(8, 8, 8), (4, 4, 16)]
    assert discriminator.spec.flatten_dim == 256

    images = generator.sample_images(torch.randn(3, 100))
    assert images.shape == (3, 16, 16, 3)
    assert float(images.abs().max()) <= 1.0
    logit, style = discriminator(generator(torch.randn(3, 100)))
    assert logit.shape == (3,) and style.shape == (3, 2)


def test_full_size_discriminator_shapes():
    discriminator = Discriminator(DiscriminatorSpec(image_dim=256, n_styles=10))
    assert discriminator.intermediate_shapes() == discriminator.spec.layer_plan()
    assert discriminator.spec.final_size == 1


@pytest.mark.parametrize('make', [
    lambda: GeneratorSpec(image_dim=128),
    lambda: GeneratorSpec(image_dim=12, toy=True),
    lambda: DiscriminatorSpec(image_dim=1024),
    lambda: DiscriminatorSpec(n_styles=1),
    lambda: DiscriminatorSpec(image_dim=8, toy=True, doubling_layers=5),
    lambda: Discriminator(DiscriminatorSpec(image_dim=16, n_styles=3, toy=True, doubling_layers=1, constant_layers=0),
                          labels=('a', 'b')),
])
def test_spec_validation(make):
    with pytest.raises(ConfigError):
        make()


def test_model_input_checks():
    config = toy_config()
    with pytest.raises(ShapeError):
        Generator(config.generator_spec())(torch.randn(2, 64))
    with pytest.raises(ShapeError):
        Discriminator(config.discriminator_spec(2))(torch.randn(2, 3, 8, 8))


def test_loss_terms_against_hand_values():
    terms = can_loss_terms(torch.tensor([0.9]), torch.tensor([0.2]), torch.tensor([[0.7, 0.3]]), torch.tensor([0]),
                           torch.tensor([[0.5, 0.5]]))
    assert float(terms.d_real) == pytest.approx(-math.log(0.9), rel=1e-5)
    assert float(terms.d_fake) == pytest.approx(-math.log(0.8), rel=1e-5)
    assert float(terms.g_adversarial) == pytest.approx(-math.log(0.2), rel=1e-5)
    assert float(terms.style_classification) == pytest.approx(-math.log(0.7), rel=1e-5)
    assert float(terms.style_ambiguity) == pytest.approx(math.log(2), rel=1e-5)
    loss_d, loss_g = can_losses(torch.tensor([0.9]), torch.tensor([0.2]), torch.tensor([[0.7, 0.3]]),
                                torch.tensor([0]), torch.tensor([[0.5, 0.5]]), style_weight=2.0, ambiguity_weight=3.0)
    assert float(loss_d) == pytest.approx(-math.log(0.9) - math.log(0.8) - 2.0 * math.log(0.7), rel=1e-5)
    assert float(loss_g) == pytest.approx(-math.log(0.2) + 3.0 * math.log(2), rel=1e-5)


def test_zero_style_weights_cut_the_style_gradients():
    real_style = torch.tensor([[0.6, 0.4]], requires_grad=True)
    fake_style = torch.tensor([[0.9, 0.1]], requires_grad=True)
    loss_d, loss_g = can_losses(torch.tensor([0.9]), torch.tensor([0.2]), real_style, torch.tensor([1]), fake_style,
                                style_weight=0.0, ambiguity_weight=0.0)
    (loss_d + loss_g).backward()
    assert torch.count_nonzero(real_style.grad) == 0
    assert torch.count_nonzero(fake_style.grad) == 0


def test_loss_shape_checks():
    with pytest.raises(ShapeError):
        can_loss_terms(torch.tensor([0.9]), torch.tensor([0.2]), torch.tensor([[0.7, 0.3]]), torch.tensor([0]),
                       torch.tensor([[0.2, 0.3, 0.5]]))


@pytest.mark.parametrize('real_bin,fake_bin', [
    (torch.full((2, 1), 0.9), torch.full((2,), 0.2)),
    (torch.full((2,), 0.9), torch.full((2, 1), 0.2)),
    (torch.full((2,), 0.9), torch.full((3,), 0.2)),
    (torch.full((2, 1), 0.9), torch.full((2, 1), 0.2)),
])
def test_binary_outputs_must_be_flat_and_aligned(real_bin, fake_bin):
    style = torch.tensor([[0.7, 0.3], [0.4, 0.6]])
    with pytest.raises(ShapeError):
        can_loss_terms(real_bin, fake_bin, style, torch.tensor([0, 1]), style)


def test_gradient_penalty_closed_form():
    real, fake = torch.randn(4, 3, 2, 2), torch.randn(4, 3, 2, 2)
    penalty = gradient_penalty(lambda x: 2.0 * x.sum(dim=(1, 2, 3)), real, fake, gp_lambda=10.0)
    assert float(penalty) == pytest.approx(10.0 * (2.0 * math.sqrt(12) - 1.0) ** 2, rel=1e-5)

    w = torch.randn(12)
    w = w / w.norm()
    unit = gradient_penalty(lambda x: x.reshape(x.shape[0], -1) @ w, real, fake)
    assert float(unit) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ShapeError):
        gradient_penalty(lambda x: x.sum(), real, fake[:2])


def test_gradient_penalty_on_discriminator_is_differentiable():
    discriminator = Discriminator(toy_config().discriminator_spec(2))
    data = toy_tensors(per_class=4)
    penalty = gradient_penalty(discriminator.critic, data.images[:4], torch.rand(4, 3, 16, 16) * 2 - 1)
    penalty.backward()
    assert discriminator.binary_head.weight.grad is not None


def test_gradient_penalty_is_taken_on_the_binary_logit():
    torch.manual_seed(0)
    discriminator = Discriminator(toy_config().discriminator_spec(2)).eval()
    with torch.no_grad():
        discriminator.binary_head.bias.fill_(50.0)
    x = torch.rand(4, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        scores = discriminator.critic(x)
        torch.testing.assert_close(scores, discriminator(x)[0])
    assert scores.shape == (4,)
    assert bool((scores > 1.0).all())


def test_config_validation_and_grid():
    with pytest.raises(ConfigError):
        CanTrainConfig(dataset='photos')
    with pytest.raises(ConfigError):
        CanTrainConfig(batch_size=0)
    grid = can_grid()
    assert len(grid) == 16
    assert len({(c.image_dim, c.dataset, c.batch_size, c.gradient_penalty) for c in grid}) == 16
    assert all(c.learning_rate == 0.001 for c in grid)


def test_style_tensor_validation():
    images, labels = toy_style_tensors(TOY_LABELS, per_class=2)
    with pytest.raises(ContractViolation):
        StyleImageTensors(images, labels + 5, TOY_LABELS)
    with pytest.raises(ShapeError):
        StyleImageTensors(images[:, :1], labels, TOY_LABELS)


def test_train_can_writes_artifacts(tmp_path):
    result = train_can(toy_config(), toy_tensors(), out_dir=str(tmp_path), digest='0123456789ab')
    history = pd.read_csv(tmp_path / 'can_losses.csv')
    assert list(history.columns) == ['step', 'epoch', 'loss_d', 'loss_g', 'd_real', 'd_fake', 'g_adversarial',
                                     'style_classification', 'style_ambiguity', 'gradient_penalty']
    assert len(history) == 5
    assert np.all(np.isfinite(history.drop(columns=['step', 'epoch']).to_numpy()))
    assert (tmp_path / 'samples_epoch_000.png').exists()
    assert result.checkpoint == os.path.join(str(tmp_path), 'can.pt')

    generator, discriminator, meta = load_can_checkpoint(result.checkpoint)
    assert meta['labels'] == list(TOY_LABELS)
    assert discriminator.labels == TOY_LABELS
    z = torch.randn(2, 100)
    torch.testing.assert_close(generator(z), result.generator(z))
    assert load_discriminator(result.checkpoint).spec == result.discriminator.spec


def test_train_can_input_checks():
    with pytest.raises(ShapeError):
        train_can(toy_config(image_dim=32), toy_tensors())
    with pytest.raises(ConfigError):
        train_can(toy_config(), toy_tensors(), discriminator=Discriminator(toy_config().discriminator_spec(3)))


def test_image_sampler_is_seeded():
    sampler = CanImageSampler(Generator(toy_config().generator_spec()))
    a, b, c = sampler('ignored', 3), sampler('other', 3), sampler('ignored', 4)
    assert a.shape == (16, 16, 3) and a.dtype == np.float64
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_style_head_generalizes_on_toy_styles():
    torch.manual_seed(0)
    discriminator = Discriminator(toy_config().discriminator_spec(2), TOY_LABELS)
    losses = pretrain_style_head(discriminator, toy_tensors(seed=0), steps=150, batch_size=32, seed=0)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert style_accuracy(discriminator, toy_tensors(seed=1)) > 0.5


@pytest.mark.slow
def test_ambiguity_loss_drops_under_a_frozen_classifier():
    def brightness_logits(images):
        z = 5.0 * (images.mean(dim=(1, 2, 3)) - 0.5)
        return torch.stack([z / 2, -z / 2], dim=-1)

    config = toy_config(batch_size=16, epochs=100, max_steps=200, ambiguity_weight=5.0)
    result = train_can(config, toy_tensors(), external_classifier=brightness_logits)
    ambiguity = result.history['style_ambiguity'].to_numpy()
    assert len(ambiguity) == 200
    assert np.all(ambiguity >= math.log(2) - 1e-6)
    assert ambiguity[:20].mean() > ambiguity[-20:].mean()
