"""Alternating discriminator/generator optimisation.

Training is a gisforge run: :class:`TrainTop` is the top-level component and
the run environment's clock counts optimisation steps. Step ``t`` executes
at simulation time ``t``:

 - :class:`BatchFeed` assembles batches ahead of the learner into a bounded
   :class:`simpy.Store`;
 - :class:`Learner` takes one batch per step, updates the discriminator and
   then the generator, and records the step's metrics;
 - :class:`Checkpointer` writes checkpoints at the configured cadence and at
   the end of the run.

Batch composition is a pure function of the step, so a run resumed from a
checkpoint at step ``t`` continues exactly as the uninterrupted run would.

"""
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import glob
import os

from PIL import Image
import numpy as np
import simpy
import torch

from .component import Component
from .config import ConfigDict, ConfigError, check_config
from .discriminator import (
    Discriminator,
    DiscriminatorConfig,
    build_discriminator,
    d_regularizer,
    patch_accuracy,
)
from .gbuffer import (
    DatasetError,
    GBufferSample,
    SampleDataset,
    ValidationError,
    build_pyramid,
    num_channels,
    open_dataset,
    validate_dataset,
)
from .generator import (
    Generator,
    GeneratorConfig,
    ShapeError,
    build_generator,
    composite,
    pyramid_tensors,
    to_images,
)
from .objective import (
    LossBundle,
    adversarial_d_loss,
    adversarial_g_loss,
    background_loss,
    cell_occupancy,
    combine_diversity,
)
from .perception import FeatureExtractor, build_extractor, perceptual_loss
from .runner import ResultDict, RunEnvironment, run
from .util import atomic_open, write_json

CHECKPOINT_VERSION = 1

DTYPES = {'float32': torch.float32, 'float64': torch.float64}


class CheckpointError(Exception):
    """A checkpoint is missing, unreadable or incompatible."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite."""

    def __init__(self, step: int, indices: Sequence[int], what: str) -> None:
        self.step = step
        self.indices = list(indices)
        self.what = what
        super().__init__(
            f'non-finite {what} at step {step}; batch samples {self.indices}'
        )


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    limit: int = 0
    batch_size: int = 8
    steps: int = 5000
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    gamma: float = 2.0
    rho: float = 0.1
    k: int = 9
    levels: int = 4
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    adversarial: bool = True
    exclude: Tuple[str, ...] = ()
    composite: str = 'identity'
    dtype: str = 'float32'
    real_dir: str = ''
    prefetch: int = 2

    def __post_init__(self) -> None:
        if self.batch_size <= 0 or self.checkpoint_every <= 0 or self.log_every <= 0:
            raise ConfigError('batch size and step cadences must be positive')
        if self.steps < 0:
            raise ConfigError(f'steps must be >= 0, got {self.steps}')
        if self.lr_g < 0 or self.lr_d < 0:
            raise ConfigError('learning rates must be >= 0')
        if self.dtype not in DTYPES:
            raise ConfigError(f'unknown dtype: {self.dtype}')

    @classmethod
    def from_config(cls, config: ConfigDict) -> 'TrainConfig':
        return cls(
            dataset=config['train.dataset'],
            limit=config['train.limit'],
            batch_size=config['train.batch_size'],
            steps=config['train.steps'],
            lr_g=config['train.lr_g'],
            lr_d=config['train.lr_d'],
            betas=tuple(config['train.betas']),  # type: ignore
            gamma=config['loss.gamma'],
            rho=config['loss.rho'],
            k=config['gen.k'],
            levels=config['gen.levels'],
            seed=config['run.seed'],
            checkpoint_every=config['train.checkpoint_every'],
            log_every=config['train.log_every'],
            adversarial=config['train.adversarial'],
            exclude=tuple(config['train.exclude']),
            composite=config['gen.composite'],
            dtype=config['train.dtype'],
            real_dir=config['train.real_dir'],
            prefetch=config['train.prefetch'],
        )

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class TrainState:
    """Everything a training step reads and mutates."""

    config: ConfigDict
    settings: TrainConfig
    generator: Generator
    discriminator: Discriminator
    extractor: FeatureExtractor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    #: Draws the output index of the discriminator's fake images.
    rng: torch.Generator
    step: int = 0


@dataclass
class Batch:
    indices: List[int]
    pyramid: List[torch.Tensor]
    target: torch.Tensor
    mask: torch.Tensor
    background: torch.Tensor
    #: Real images for the discriminator; the targets when None.
    real: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return len(self.indices)


def _images(arrays: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    """Stack ``H x W x C`` arrays into an ``N x C x H x W`` tensor."""
    stacked = np.stack([np.asarray(a, dtype=np.float32) for a in arrays])
    if stacked.ndim == 3:
        stacked = stacked[..., None]
    tensor = torch.from_numpy(np.ascontiguousarray(stacked.transpose(0, 3, 1, 2)))
    return tensor.to(dtype)


def make_batch(
    samples: Sequence[GBufferSample],
    indices: Sequence[int],
    levels: int,
    exclude: Sequence[str] = (),
    dtype: torch.dtype = torch.float32,
    real: Optional[Sequence[np.ndarray]] = None,
) -> Batch:
    """Convert samples with targets into network-ready tensors."""
    for index, sample in zip(indices, samples):
        if sample.target is None:
            raise ValidationError(f'sample {index} has no target')
    pyramids = [build_pyramid(s, levels, exclude) for s in samples]
    return Batch(
        indices=list(indices),
        pyramid=pyramid_tensors(pyramids, dtype),
        target=_images([s.target for s in samples], dtype),  # type: ignore
        mask=_images([s.mask for s in samples], dtype),
        background=_images([s.background for s in samples], dtype),
        real=None if real is None else _images(real, dtype),
    )


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> List[int]:
    """Dataset indices of the batch of `step`.

    Samples are drawn without replacement from a per-epoch permutation
    seeded by ``(seed, epoch)``.

    """
    indices = []
    for position in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(position, n)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        indices.append(int(order[offset]))
    return indices


class RealPool:
    """Directory of real RGB images used as the discriminator's real pool."""

    def __init__(self, directory: str, size: Tuple[int, int]) -> None:
        self.paths = sorted(glob.glob(os.path.join(directory, '*.png')))
        if not self.paths:
            raise DatasetError(-1, f'no PNG images in {directory}')
        self.size = tuple(size)

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> np.ndarray:
        try:
            with Image.open(self.paths[index]) as image:
                array = np.asarray(image.convert('RGB'))
        except OSError as e:
            raise DatasetError(index, str(e)) from e
        if array.shape[:2] != self.size:
            raise DatasetError(
                index, f'{self.paths[index]} is {array.shape[:2]}, expected {self.size}'
            )
        return array / np.float32(255)


def build_state(config: ConfigDict, channels_in: int) -> TrainState:
    """Fresh networks and optimisers seeded from ``run.seed``."""
    settings = TrainConfig.from_config(config)
    dtype = settings.torch_dtype
    generator = build_generator(
        GeneratorConfig.from_config(config), channels_in, seed=settings.seed
    ).to(dtype)
    discriminator = build_discriminator(
        DiscriminatorConfig.from_config(config), seed=settings.seed + 1
    ).to(dtype)
    extractor = build_extractor(config).to(dtype)
    return TrainState(
        config=config,
        settings=settings,
        generator=generator,
        discriminator=discriminator,
        extractor=extractor,
        opt_g=torch.optim.Adam(
            generator.parameters(), lr=settings.lr_g, betas=settings.betas
        ),
        opt_d=torch.optim.Adam(
            discriminator.parameters(), lr=settings.lr_d, betas=settings.betas
        ),
        rng=torch.Generator().manual_seed(settings.seed),
    )


def _check_finite(
    value: torch.Tensor, state: TrainState, batch: Batch, what: str
) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(state.step, batch.indices, what)


def discriminator_step(state: TrainState, batch: Batch) -> Dict[str, float]:
    """One discriminator update against a fake drawn from a random output.

    The generator runs without gradient and its parameters are not touched.

    """
    settings = state.settings
    gen, disc = state.generator, state.discriminator
    with torch.no_grad():
        outputs = composite(
            gen(batch.pyramid), batch.mask, batch.background, settings.composite
        )
        pick = torch.randint(outputs.shape[1], (batch.size,), generator=state.rng)
        fake = outputs[torch.arange(batch.size), pick]
    real = batch.target if batch.real is None else batch.real
    logits_real = disc(real)
    logits_fake = disc(fake)
    d_loss = adversarial_d_loss(logits_fake, logits_real, batch.mask)
    reg = d_regularizer(disc, real, fake, settings.gamma)
    total = d_loss + reg
    _check_finite(total, state, batch, 'discriminator loss')
    state.opt_d.zero_grad()
    total.backward()
    state.opt_d.step()
    fake_targets = 1 - cell_occupancy(batch.mask, logits_fake)
    return {
        'd_loss': float(d_loss),
        'regularizer': float(reg),
        'd_accuracy': patch_accuracy(logits_real, logits_fake, fake_targets),
    }


def generator_losses(state: TrainState, batch: Batch) -> LossBundle:
    """The generator's loss bundle for `batch` with the current parameters."""
    settings = state.settings
    outputs = composite(
        state.generator(batch.pyramid),
        batch.mask,
        batch.background,
        settings.composite,
    )
    n, k = outputs.shape[:2]
    with torch.no_grad():
        target_features = state.extractor(batch.target)
    perceptual = perceptual_loss(
        state.extractor, batch.target, outputs, batch.mask, target_features
    )
    adversarial = None
    if settings.adversarial:
        logits = state.discriminator(outputs.flatten(0, 1))
        adversarial = adversarial_g_loss(
            logits.view(n, k, *logits.shape[1:]), batch.mask
        )
    background = background_loss(batch.target, outputs, batch.mask)
    return combine_diversity(
        perceptual, adversarial, background, batch.mask, settings.rho
    )


def generator_step(state: TrainState, batch: Batch) -> LossBundle:
    """One generator update with the discriminator frozen."""
    disc = state.discriminator
    disc.requires_grad_(False)
    try:
        bundle = generator_losses(state, batch)
        _check_finite(bundle.total, state, batch, 'generator loss')
        state.opt_g.zero_grad()
        bundle.total.backward()
        state.opt_g.step()
    finally:
        disc.requires_grad_(True)
    return bundle


def train_step(state: TrainState, batch: Batch) -> Tuple[TrainState, Dict[str, Any]]:
    """One discriminator then one generator update.

    Metrics are computed from the parameters before the respective update.
    Without an adversary only the generator is updated.

    :raises TrainingDiverged: When a loss is non-finite.

    """
    metrics: Dict[str, Any] = {}
    if state.settings.adversarial:
        metrics.update(discriminator_step(state, batch))
    bundle = generator_step(state, batch)
    metrics.update(bundle.summary())
    state.step += 1
    return state, metrics


def _portable(config: ConfigDict) -> ConfigDict:
    return {k: v for k, v in config.items() if not k.startswith('meta.')}


def save_checkpoint(path: str, state: TrainState) -> None:
    """Atomically write the training state to `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = {
        'version': CHECKPOINT_VERSION,
        'step': state.step,
        'config': _portable(state.config),
        'dtype': state.settings.dtype,
        'channels_in': state.generator.channels_in,
        'generator': state.generator.state_dict(),
        'discriminator': state.discriminator.state_dict(),
        'optimizer': {
            'generator': state.opt_g.state_dict(),
            'discriminator': state.opt_d.state_dict(),
        },
        'rng': state.rng.get_state(),
    }
    with atomic_open(path, 'wb') as f:
        torch.save(payload, f)


def load_checkpoint(path: str) -> Dict[str, Any]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    :raises CheckpointError: When the file is missing, unreadable, or of an
        unsupported version.

    """
    if not os.path.isfile(path):
        raise CheckpointError(f'no checkpoint at {path}')
    try:
        payload = torch.load(path, map_location='cpu', weights_only=False)
    except Exception as e:
        raise CheckpointError(f'unreadable checkpoint {path}: {e}') from e
    if not isinstance(payload, dict) or payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version in {path}')
    return payload


def restore_state(config: ConfigDict, checkpoint: Dict[str, Any]) -> TrainState:
    """Rebuild the training state saved in `checkpoint` under `config`."""
    state = build_state(config, checkpoint['channels_in'])
    try:
        state.generator.load_state_dict(checkpoint['generator'])
        state.discriminator.load_state_dict(checkpoint['discriminator'])
        state.opt_g.load_state_dict(checkpoint['optimizer']['generator'])
        state.opt_d.load_state_dict(checkpoint['optimizer']['discriminator'])
    except (RuntimeError, ValueError, KeyError) as e:
        raise CheckpointError(f'checkpoint does not match the configuration: {e}')
    state.rng.set_state(checkpoint['rng'])
    state.step = checkpoint['step']
    return state


def checkpoint_name(step: int) -> str:
    return f'checkpoint-{step:06d}.pt'


class TrainTop(Component):
    """Top-level component of a training run."""

    base_name = 'top'

    @classmethod
    def initial_step(cls, config: ConfigDict) -> int:
        path = config['train.resume']
        return load_checkpoint(path)['step'] if path else 0

    @classmethod
    def pre_init(cls, env: RunEnvironment) -> None:
        config = env.config
        check_config(config)
        if config['train.threads'] > 0:
            torch.set_num_threads(config['train.threads'])
        failures = validate_dataset(
            config['train.dataset'], config['gen.levels'], config['train.limit']
        )
        if failures:
            lines = [
                f'{name}: {"; ".join(report.messages)}'
                for name, report in sorted(failures.items())
            ]
            raise ValidationError(
                f'{len(failures)} invalid samples in {config["train.dataset"]}:\n'
                + '\n'.join(lines)
            )
        env.until = config['train.steps']

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        config = self.env.config
        self.settings = TrainConfig.from_config(config)
        self.dataset = open_dataset(self.settings.dataset, self.settings.limit)
        if config['train.resume']:
            self.state = restore_state(config, load_checkpoint(config['train.resume']))
            self.info(f'resumed at step {self.state.step}')
        else:
            channels_in = num_channels(len(self.dataset.palette), self.settings.exclude)
            self.state = build_state(config, channels_in)
        self.feed = BatchFeed(self, dataset=self.dataset)
        self.learner = Learner(self)
        self.checkpointer = Checkpointer(self)

    def connect_children(self) -> None:
        self.connect(self.learner, 'batches', src=self.feed)
        self.connect(self.learner, 'state')
        self.connect(self.checkpointer, 'state')

    def get_result_hook(self, result: ResultDict) -> None:
        result['train.step'] = self.state.step
        result['train.checkpoint'] = self.checkpointer.last_path


class BatchFeed(Component):
    """Assemble the batch of every step ahead of the learner."""

    base_name = 'feed'

    def __init__(self, *args: Any, dataset: SampleDataset, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.dataset = dataset
        self.settings = TrainConfig.from_config(self.env.config)
        self.real_pool: Optional[RealPool] = None
        if self.settings.real_dir:
            self.real_pool = RealPool(self.settings.real_dir, dataset.size)
        self.batches = simpy.Store(self.env, capacity=max(1, self.settings.prefetch))
        self.add_process(self._feed)

    def batch(self, step: int) -> Batch:
        settings = self.settings
        indices = batch_indices(
            step, settings.batch_size, len(self.dataset), settings.seed
        )
        real = None
        if self.real_pool is not None:
            real_indices = batch_indices(
                step, settings.batch_size, len(self.real_pool), settings.seed + 1
            )
            real = [self.real_pool[i] for i in real_indices]
        return make_batch(
            [self.dataset[i] for i in indices],
            indices,
            settings.levels,
            settings.exclude,
            settings.torch_dtype,
            real,
        )

    def _feed(self):
        step = int(self.env.now)
        while True:
            yield self.batches.put(self.batch(step))
            step += 1


class Learner(Component):
    """Run one training step per tick of the step clock."""

    base_name = 'learner'

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.add_connections('batches', 'state')
        self.record = self.env.tracemgr.get_trace_function(self.scope, records={})
        self.log_every = self.env.config['train.log_every']
        self.last_metrics: Dict[str, Any] = {}
        self.add_process(self._learn)

    def _learn(self):
        while True:
            batch = yield self.batches.get()
            try:
                _, metrics = train_step(self.state, batch)
            except TrainingDiverged as e:
                write_json(
                    'diverged.json',
                    {'step': e.step, 'indices': e.indices, 'what': e.what},
                )
                raise
            self.record(metrics)
            if int(self.env.now) % self.log_every == 0:
                self.info(
                    f'loss {metrics["loss"]:.5f} '
                    f'perceptual {metrics["perceptual"]:.5f} '
                    f'background {metrics["background"]:.5f}'
                )
            self.last_metrics = metrics
            yield self.env.timeout(1)

    def get_result_hook(self, result: ResultDict) -> None:
        result['train.metrics'] = {
            k: v for k, v in self.last_metrics.items() if k != 'k_star'
        }


class Checkpointer(Component):
    """Save the training state every ``train.checkpoint_every`` steps."""

    base_name = 'checkpointer'

    def __init__(self, *args: Any, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.add_connections('state')
        self.every = self.env.config['train.checkpoint_every']
        self.last_step: Optional[int] = None
        self.last_path: Optional[str] = None
        self.add_process(self._cadence)

    def save(self) -> None:
        path = os.path.abspath(checkpoint_name(self.state.step))
        save_checkpoint(path, self.state)
        self.last_step, self.last_path = self.state.step, path
        self.info(f'saved {path}')

    def elab_hook(self) -> None:
        if self.env.config['train.resume']:
            self.last_step = self.state.step
            self.last_path = self.env.config['train.resume']
        else:
            self.save()

    def _cadence(self):
        while True:
            step = int(self.env.now)
            yield self.env.timeout(self.every - step % self.every)
            self.save()

    def post_run_hook(self) -> None:
        if self.last_step != self.state.step:
            self.save()


def fit(config: ConfigDict, **kwargs: Any) -> ResultDict:
    """Train from scratch (or from ``train.resume``) in ``run.workspace``.

    :returns: The run's result dict; ``'train.checkpoint'`` names the final
        checkpoint.

    """
    return run(config, TrainTop, **kwargs)


def resume(
    checkpoint: str, overrides: Optional[ConfigDict] = None, **kwargs: Any
) -> ResultDict:
    """Continue the run that wrote `checkpoint`.

    The checkpoint's configuration is used, updated with `overrides` (for
    example a larger ``train.steps``).

    """
    config = dict(load_checkpoint(checkpoint)['config'])
    config.update(overrides or {})
    config['train.resume'] = os.path.abspath(checkpoint)
    return fit(config, **kwargs)


class Synthesizer:
    """Frozen generator of a checkpoint for inference."""

    def __init__(self, checkpoint: Union[str, Dict[str, Any]]) -> None:
        if isinstance(checkpoint, str):
            checkpoint = load_checkpoint(checkpoint)
        self.config: ConfigDict = checkpoint['config']
        self.settings = TrainConfig.from_config(self.config)
        self.generator = build_generator(
            GeneratorConfig.from_config(self.config), checkpoint['channels_in']
        ).to(self.settings.torch_dtype)
        try:
            self.generator.load_state_dict(checkpoint['generator'])
        except RuntimeError as e:
            raise CheckpointError(f'generator parameters do not match: {e}')
        self.generator.eval()
        self.generator.requires_grad_(False)

    @property
    def k(self) -> int:
        return self.generator.config.k

    def check_sample(self, sample: GBufferSample) -> None:
        expected = self.generator.config.full_size
        if (sample.height, sample.width) != expected:
            raise ShapeError(
                f'sample is {sample.height}x{sample.width}, checkpoint expects '
                f'{expected[0]}x{expected[1]}'
            )
        channels = num_channels(sample.num_materials, self.settings.exclude)
        if channels != self.generator.channels_in:
            raise ShapeError(
                f'sample gives {channels} input channels, checkpoint expects '
                f'{self.generator.channels_in}'
            )

    def __call__(self, samples: Sequence[GBufferSample]) -> np.ndarray:
        """Synthesize ``N x K x H x W x 3`` images in [0, 1]."""
        for sample in samples:
            self.check_sample(sample)
        dtype = self.settings.torch_dtype
        pyramids = [
            build_pyramid(s, self.settings.levels, self.settings.exclude)
            for s in samples
        ]
        mask = _images([s.mask for s in samples], dtype)
        background = _images([s.background for s in samples], dtype)
        with torch.no_grad():
            outputs = self.generator(pyramid_tensors(pyramids, dtype))
            outputs = composite(outputs, mask, background, self.settings.composite)
        return to_images(outputs)


def synthesize(
    checkpoint: Union[str, Synthesizer], sample: GBufferSample
) -> np.ndarray:
    """The K images (``K x H x W x 3``) a checkpoint synthesizes for `sample`."""
    if not isinstance(checkpoint, Synthesizer):
        checkpoint = Synthesizer(checkpoint)
    return checkpoint([sample])[0]
