import glob
import json
import os
import shutil

from PIL import Image
import numpy as np
import pytest
import torch

from gisforge.config import ConfigError, default_config, presets
from gisforge.forge import SceneRanges, generate_dataset, generate_sample
from gisforge.gbuffer import DatasetError, ValidationError, open_dataset
from gisforge.generator import ShapeError
from gisforge.trainer import (
    CheckpointError,
    RealPool,
    Synthesizer,
    TrainConfig,
    TrainingDiverged,
    batch_indices,
    build_state,
    checkpoint_name,
    discriminator_step,
    fit,
    generator_step,
    load_checkpoint,
    make_batch,
    restore_state,
    resume,
    save_checkpoint,
    synthesize,
    train_step,
)

pytestmark = pytest.mark.usefixtures('cleandir')


def _state_and_batch(config, indices=(0, 1)):
    dataset = open_dataset(config['train.dataset'])
    state = build_state(config, 14)
    batch = make_batch(
        [dataset[i] for i in indices],
        indices,
        config['gen.levels'],
        dtype=state.settings.torch_dtype,
    )
    return state, batch


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(before, module):
    return all(torch.equal(a, b) for a, b in zip(before, module.parameters()))


def _checkpoints(directory):
    return sorted(os.path.basename(p) for p in glob.glob(f'{directory}/*.pt'))


def test_train_config(smoke_config):
    settings = TrainConfig.from_config(smoke_config)
    assert settings.k == 2
    assert settings.betas == (0.9, 0.999)
    assert settings.torch_dtype == torch.float32
    with pytest.raises(ConfigError):
        TrainConfig(dataset='d', steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(dataset='d', dtype='float16')
    with pytest.raises(ConfigError):
        TrainConfig(dataset='d', checkpoint_every=0)


def test_batch_indices():
    first_epoch = batch_indices(0, 2, 4, seed=1) + batch_indices(1, 2, 4, seed=1)
    assert sorted(first_epoch) == [0, 1, 2, 3]
    assert batch_indices(5, 3, 4, seed=1) == batch_indices(5, 3, 4, seed=1)
    big = batch_indices(0, 6, 4, seed=0)
    assert sorted(big[:4]) == [0, 1, 2, 3]
    assert len(big) == 6


def test_make_batch(smoke_config):
    dataset = open_dataset(smoke_config['train.dataset'])
    batch = make_batch([dataset[0], dataset[2]], [0, 2], 3)
    assert batch.size == 2
    assert batch.target.shape == (2, 3, 32, 32)
    assert batch.mask.shape == (2, 1, 32, 32)
    assert [tuple(t.shape[1:]) for t in batch.pyramid] == [
        (14, 8, 8),
        (14, 16, 16),
        (14, 32, 32),
    ]
    with pytest.raises(ValidationError):
        make_batch([dataset[0].replace(target=None)], [0], 3)


def test_make_batch_exclude(smoke_config):
    dataset = open_dataset(smoke_config['train.dataset'])
    batch = make_batch([dataset[0]], [0], 3, exclude=['normals', 'depth'])
    assert batch.pyramid[0].shape[1] == 10


def test_discriminator_step_leaves_generator(smoke_config):
    state, batch = _state_and_batch(smoke_config)
    gen_before = _params(state.generator)
    disc_before = _params(state.discriminator)
    metrics = discriminator_step(state, batch)
    assert _same(gen_before, state.generator)
    assert not _same(disc_before, state.discriminator)
    assert all(p.grad is None for p in state.generator.parameters())
    assert 0 <= metrics['d_accuracy'] <= 1
    assert metrics['regularizer'] >= 0


def test_generator_step_leaves_discriminator(smoke_config):
    state, batch = _state_and_batch(smoke_config)
    gen_before = _params(state.generator)
    disc_before = _params(state.discriminator)
    bundle = generator_step(state, batch)
    assert _same(disc_before, state.discriminator)
    assert not _same(gen_before, state.generator)
    assert all(p.requires_grad for p in state.discriminator.parameters())
    assert bundle.k == 2


def test_zero_learning_rate(smoke_config):
    smoke_config['train.lr_g'] = 0.0
    smoke_config['train.lr_d'] = 0.0
    state, batch = _state_and_batch(smoke_config)
    gen_before = _params(state.generator)
    disc_before = _params(state.discriminator)
    state, metrics = train_step(state, batch)
    assert state.step == 1
    assert _same(gen_before, state.generator)
    assert _same(disc_before, state.discriminator)
    assert np.isfinite(metrics['loss'])


def test_train_step_deterministic(smoke_config):
    state_a, batch = _state_and_batch(smoke_config)
    state_b, _ = _state_and_batch(smoke_config)
    for _ in range(2):
        _, metrics_a = train_step(state_a, batch)
        _, metrics_b = train_step(state_b, batch)
        assert metrics_a == metrics_b


def test_supervised_step_skips_discriminator(smoke_config):
    smoke_config.update(presets.resolve('supervised'))
    state, batch = _state_and_batch(smoke_config)
    disc_before = _params(state.discriminator)
    _, metrics = train_step(state, batch)
    assert 'd_loss' not in metrics
    assert metrics['adversarial'] == 0
    assert _same(disc_before, state.discriminator)


def test_diverged(smoke_config):
    state, batch = _state_and_batch(smoke_config, indices=(3, 1))
    batch.target = torch.full_like(batch.target, float('nan'))
    with pytest.raises(TrainingDiverged) as e:
        train_step(state, batch)
    assert e.value.step == 0
    assert e.value.indices == [3, 1]
    assert 'discriminator loss' in str(e.value)


def test_checkpoint_round_trip(smoke_config):
    state, batch = _state_and_batch(smoke_config)
    train_step(state, batch)
    save_checkpoint('ckpt/a.pt', state)
    checkpoint = load_checkpoint('ckpt/a.pt')
    assert checkpoint['step'] == 1
    restored = restore_state(smoke_config, checkpoint)
    assert restored.step == 1
    for a, b in zip(state.generator.parameters(), restored.generator.parameters()):
        assert torch.equal(a, b)
    assert torch.equal(state.rng.get_state(), restored.rng.get_state())
    _, metrics_a = train_step(state, batch)
    _, metrics_b = train_step(restored, batch)
    assert metrics_a == metrics_b


def test_load_checkpoint_errors(smoke_config):
    with pytest.raises(CheckpointError):
        load_checkpoint('missing.pt')
    with open('garbage.pt', 'w') as f:
        f.write('not a checkpoint')
    with pytest.raises(CheckpointError):
        load_checkpoint('garbage.pt')
    torch.save({'version': 99}, 'future.pt')
    with pytest.raises(CheckpointError):
        load_checkpoint('future.pt')


def test_restore_mismatch(smoke_config):
    state, _ = _state_and_batch(smoke_config)
    save_checkpoint('a.pt', state)
    smoke_config['gen.widths'] = [8, 8, 4]
    with pytest.raises(CheckpointError):
        restore_state(smoke_config, load_checkpoint('a.pt'))


def test_checkpoint_name():
    assert checkpoint_name(0) == 'checkpoint-000000.pt'
    assert checkpoint_name(1234) == 'checkpoint-001234.pt'


def test_fit(smoke_config):
    result = fit(smoke_config)
    assert result['run.exception'] is None
    assert result['train.step'] == 4
    assert result['train.checkpoint'] == os.path.abspath('ws/checkpoint-000004.pt')
    assert _checkpoints('ws') == [
        'checkpoint-000000.pt',
        'checkpoint-000002.pt',
        'checkpoint-000004.pt',
    ]
    for step in (0, 2, 4):
        assert load_checkpoint(f'ws/{checkpoint_name(step)}')['step'] == step
    assert 'loss' in result['train.metrics']
    assert 'k_star' not in result['train.metrics']


def test_fit_records(smoke_config):
    fit(smoke_config)
    with open('ws/metrics.jsonl') as f:
        records = [json.loads(line) for line in f]
    assert [r['step'] for r in records] == [0, 1, 2, 3]
    assert all(r['scope'] == 'top.learner' for r in records)
    assert all(len(r['k_star']) == 2 for r in records)
    with open('ws/run.log') as f:
        log = f.read()
    assert 'top.learner: loss' in log
    assert 'checkpoint-000002.pt' in log


def test_fit_zero_steps(smoke_config):
    smoke_config['train.steps'] = 0
    result = fit(smoke_config)
    assert result['train.step'] == 0
    assert _checkpoints('ws') == ['checkpoint-000000.pt']


def test_fit_uneven_cadence(smoke_config):
    smoke_config['train.steps'] = 5
    fit(smoke_config)
    assert _checkpoints('ws')[-1] == 'checkpoint-000005.pt'
    assert len(_checkpoints('ws')) == 4


def test_fit_invalid_dataset(smoke_config, tiny_dataset):
    shutil.copytree(tiny_dataset, 'broken')
    os.remove(os.path.join('broken', '000001', 'target.png'))
    smoke_config['train.dataset'] = 'broken'
    with pytest.raises(ValidationError) as e:
        fit(smoke_config)
    assert '000001' in str(e.value)
    assert _checkpoints('ws') == []


def test_resume_matches_uninterrupted(smoke_config):
    smoke_config['train.dtype'] = 'float64'
    fit(smoke_config)
    result = resume('ws/checkpoint-000002.pt', {'run.workspace': 'ws2'})
    assert result['run.exception'] is None
    assert result['train.step'] == 4
    assert _checkpoints('ws2') == ['checkpoint-000004.pt']
    full = load_checkpoint('ws/checkpoint-000004.pt')
    resumed = load_checkpoint('ws2/checkpoint-000004.pt')
    for name, value in full['generator'].items():
        torch.testing.assert_close(resumed['generator'][name], value)
    for name, value in full['discriminator'].items():
        torch.testing.assert_close(resumed['discriminator'][name], value)
    with open('ws2/metrics.jsonl') as f:
        assert [json.loads(line)['step'] for line in f] == [2, 3]


def test_resume_longer(smoke_config):
    fit(smoke_config)
    result = resume(
        'ws/checkpoint-000004.pt', {'run.workspace': 'more', 'train.steps': 6}
    )
    assert result['train.step'] == 6
    assert _checkpoints('more') == ['checkpoint-000006.pt']


def test_resume_missing_checkpoint():
    with pytest.raises(CheckpointError):
        resume('nowhere.pt')


def test_real_pool(tmpdir):
    pool_dir = tmpdir.mkdir('real')
    for i in range(3):
        array = np.full((32, 32, 3), 40 * i, dtype=np.uint8)
        Image.fromarray(array).save(str(pool_dir.join(f'{i}.png')))
    pool = RealPool(str(pool_dir), (32, 32))
    assert len(pool) == 3
    image = pool[2]
    assert image.shape == (32, 32, 3)
    assert image.max() == pytest.approx(80 / 255)
    with pytest.raises(DatasetError):
        RealPool(str(pool_dir), (16, 16))[0]
    with pytest.raises(DatasetError):
        RealPool(str(tmpdir.mkdir('empty')), (32, 32))


def test_fit_with_real_pool(smoke_config, tmpdir):
    pool_dir = tmpdir.mkdir('real')
    rng = np.random.default_rng(0)
    for i in range(3):
        array = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        Image.fromarray(array).save(str(pool_dir.join(f'{i}.png')))
    smoke_config['train.real_dir'] = str(pool_dir)
    smoke_config['train.steps'] = 2
    assert fit(smoke_config)['train.step'] == 2


def test_synthesizer(smoke_config):
    smoke_config['train.steps'] = 0
    result = fit(smoke_config)
    synth = Synthesizer(result['train.checkpoint'])
    assert synth.k == 2
    dataset = open_dataset(smoke_config['train.dataset'])
    images = synth([dataset[0], dataset[1]])
    assert images.shape == (2, 2, 32, 32, 3)
    assert images.min() >= 0 and images.max() <= 1
    single = synthesize(synth, dataset[1])
    np.testing.assert_allclose(single, images[1], rtol=1e-5, atol=1e-6)
    assert all(not p.requires_grad for p in synth.generator.parameters())


def test_synthesizer_shape_mismatch(smoke_config):
    smoke_config['train.steps'] = 0
    synth = Synthesizer(fit(smoke_config)['train.checkpoint'])
    _, small = generate_sample(0, SceneRanges(size=(16, 16)))
    with pytest.raises(ShapeError) as e:
        synth([small])
    assert '16x16' in str(e.value)
    dataset = open_dataset(smoke_config['train.dataset'])
    sample = dataset[0]
    fewer = sample.replace(materials=sample.materials[..., :5])
    with pytest.raises(ShapeError):
        synth([fewer])


def test_synthesize_missing_checkpoint():
    with pytest.raises(CheckpointError):
        synthesize('missing.pt', None)


@pytest.mark.slow
def test_overfit_canary(tmpdir, baseline):
    config = default_config()
    config.update(presets.resolve('overfit'))
    root = str(tmpdir.join('overfit-data'))
    generate_dataset(16, config['data.seed'], root, SceneRanges.from_config(config))
    config['train.dataset'] = root
    config['run.workspace'] = 'overfit'
    result = fit(config)
    expected = baseline['overfit']
    assert result['train.step'] == expected['steps']
    loss = result['train.metrics']['loss']
    assert loss < expected['loss_below']
    baseline.check('overfit', 'final_loss', loss)


@pytest.mark.slow
def test_discriminator_learns(desk_config, baseline):
    expected = baseline['discriminator']
    desk_config['train.steps'] = expected['steps']
    result = fit(desk_config)
    accuracy = result['train.metrics']['d_accuracy']
    assert accuracy > expected['accuracy_above']
    baseline.check('discriminator', 'accuracy', accuracy)
