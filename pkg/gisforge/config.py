"""Configuration dictionaries for data generation, training and evaluation.

Every gisforge run is described by a single, flat configuration dictionary.
Keys use a dotted notation so that the oracle, the networks, the trainer and
the evaluation harness each own a namespace within the same dictionary, e.g.
``'gen.levels'``, ``'forge.shadow_factor'`` or ``'train.lr_g'``.

Keys prefixed with ``'run.'`` belong to the run machinery itself (seed,
workspace, log and records files, progress display). Models and tools should
not invent new ``'run.'`` keys.

:func:`default_config` returns the complete desk-scale configuration; every
key read anywhere in the package has a default there. That dictionary is also
the schema against which user configuration files, command line overrides and
multi-run factors are checked: a user cannot introduce a key that does not
exist, and values are coerced to the type of the default.

The :class:`NamedManager` class manages named presets (``'supervised'``,
``'overfit'``, ...) that can depend on each other and be composed into a
configuration.

"""
from collections.abc import Sequence
from copy import deepcopy
from itertools import product
from typing import (
    Any,
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Tuple,
    Type,
)
import builtins
import os

import yaml

ConfigDict = Dict[str, Any]
ConfigFactor = Tuple[List[str], List[Any]]

#: Modalities that may be removed from the generator input.
ABLATABLE_MODALITIES = ('normals', 'depth', 'materials')


class ConfigError(Exception):
    """Exception raised for a variety of configuration errors."""


_DEFAULTS: ConfigDict = {
    # Run machinery.
    'run.seed': 1234,
    'run.workspace': 'workspace',
    'run.workspace.overwrite': False,
    'run.result.file': 'result.yaml',
    'run.config.file': 'config.yaml',
    'run.log.enable': True,
    'run.log.persist': True,
    'run.log.file': 'run.log',
    'run.log.level': 'INFO',
    'run.log.format': '{level:7} {step:>7}: {scope}:',
    'run.log.include_pat': ['.*'],
    'run.log.exclude_pat': [],
    'run.records.enable': True,
    'run.records.persist': True,
    'run.records.file': 'metrics.jsonl',
    'run.progress.enable': False,
    'run.progress.max_width': 0,
    'run.progress.update_period': 1.0,
    # Procedural scene oracle.
    'forge.size': [64, 64],
    'forge.palette': 'default',
    'forge.primitives': [1, 3],
    'forge.shapes': ['sphere', 'box'],
    'forge.radius': [0.5, 1.0],
    'forge.box_size': [0.4, 0.8],
    'forge.x': [-1.5, 1.5],
    'forge.z': [-7.0, -4.5],
    'forge.camera_height': [1.0, 1.6],
    'forge.focal': 1.2,
    'forge.z_near': 1.0,
    'forge.light.elevation': [20.0, 70.0],
    'forge.light.intensity': [0.7, 1.1],
    'forge.light.ambient': [0.1, 0.3],
    'forge.shadow_factor': 0.55,
    'forge.noise.amplitude': 0.06,
    'forge.noise.cells': 8,
    'forge.albedo_jitter': 0.0,
    # Dataset generation.
    'data.root': 'dataset',
    'data.n': 2000,
    'data.seed': 7,
    'data.workers': 0,
    # Generator cascade.
    'gen.levels': 4,
    'gen.widths': [64, 64, 32, 32],
    'gen.k': 9,
    'gen.leaky_slope': 0.2,
    'gen.zero_head': False,
    'gen.composite': 'identity',
    # Patch discriminator.
    'disc.widths': [32, 64, 128, 256, 1],
    'disc.leaky_slope': 0.2,
    'disc.padding': 'zeros',
    # Perceptual network.
    'perception.kind': 'random',
    'perception.channels': [16, 32, 64, 64, 64],
    'perception.seed': 0,
    'perception.vgg.layers': [3, 8, 17, 26, 35],
    'perception.weights': '',
    # Objective.
    'loss.rho': 0.1,
    'loss.gamma': 2.0,
    # Trainer.
    'train.dataset': 'dataset',
    'train.limit': 0,
    'train.batch_size': 8,
    'train.steps': 5000,
    'train.lr_g': 2e-4,
    'train.lr_d': 1e-4,
    'train.betas': [0.9, 0.999],
    'train.adversarial': True,
    'train.exclude': [],
    'train.checkpoint_every': 1000,
    'train.log_every': 50,
    'train.dtype': 'float32',
    'train.real_dir': '',
    'train.prefetch': 2,
    'train.resume': '',
    'train.threads': 0,
    # Evaluation and experiment harnesses.
    'eval.dataset': '',
    'eval.batch_size': 16,
    'eval.psnr_cap': 99.0,
    'eval.report.file': 'eval.json',
    'gallery.limit': 16,
    'ablate.modalities': ['normals', 'depth'],
    'ablate.seeds': [1, 2, 3],
    'ablate.jobs': 0,
    'augment.n': 100,
    'augment.seed': 11,
    'augment.pick': 'random',
    'augment.index': 0,
    'augment.relabel': {},
    'augment.paste': False,
}


def default_config() -> ConfigDict:
    """Return a fresh copy of the complete desk-scale configuration."""
    return deepcopy(_DEFAULTS)


class NamedConfig(NamedTuple):
    """A preset as listed by ``gis-forge presets``."""

    category: str
    name: str
    doc: str
    depend: List[str]
    config: ConfigDict


class NamedManager:
    """Registry of configuration presets.

    A preset is a partial config plus the presets it builds on. Resolving
    a preset applies its dependencies first and its own items last, and
    presets named later on the command line win over earlier ones.

    """

    def __init__(self) -> None:
        self._presets: Dict[str, NamedConfig] = {}

    def name(
        self,
        name: str,
        depend: Optional[List[str]] = None,
        config: Optional[ConfigDict] = None,
        category: str = '',
        doc: str = '',
    ) -> None:
        """Register preset `name`; names must be unique."""
        if name in self._presets:
            raise ConfigError(f'name already used: {name}')
        self._presets[name] = NamedConfig(
            category, name, doc, list(depend or ()), dict(config or {})
        )

    def resolve(self, *names: str) -> ConfigDict:
        """Merge the presets `names` (with their dependencies) into one dict."""
        merged: ConfigDict = {}
        for partial in self._partials(names):
            merged.update(partial)
        return merged

    def _partials(self, names: Iterable[str]) -> Iterator[ConfigDict]:
        for name in names:
            try:
                preset = self._presets[name]
            except KeyError:
                raise ConfigError(f'unknown named config: {name}')
            yield from self._partials(preset.depend)
            yield preset.config

    def __iter__(self) -> Iterator[NamedConfig]:
        return iter(self._presets.values())


presets = NamedManager()
presets.name('desk', doc='desk-scale defaults: 64x64, L=4, K=9, 5000 steps')
presets.name(
    'supervised',
    config={'train.adversarial': False},
    category='train',
    doc='perceptual + background losses only, no discriminator',
)
presets.name(
    'overfit',
    ['supervised'],
    {
        'data.n': 16,
        'train.limit': 16,
        'train.batch_size': 16,
        'train.steps': 3000,
        'train.checkpoint_every': 1000,
    },
    category='train',
    doc='16-sample overfit canary',
)
presets.name(
    'diversity',
    config={'gen.k': 3},
    category='experiment',
    doc='three hypotheses for the lighting diversity experiment',
)
presets.name(
    'smoke',
    config={
        'forge.size': [32, 32],
        'data.n': 4,
        'gen.levels': 3,
        'gen.widths': [8, 8, 8],
        'gen.k': 2,
        'disc.widths': [8, 8, 8, 8, 1],
        'perception.channels': [4, 8],
        'train.batch_size': 2,
        'train.steps': 4,
        'train.checkpoint_every': 2,
        'train.log_every': 1,
    },
    category='test',
    doc='tiny shapes for quick end-to-end checks',
)


def load_config_file(filename: str) -> ConfigDict:
    """Read a flat key/value YAML configuration file.

    The file must contain a single mapping of dotted keys to values. Nested
    mappings are only allowed as values of dict-typed keys.

    :raises .ConfigError: If the file is not a flat mapping.

    """
    with open(filename) as f:
        user_config = yaml.safe_load(f)
    if user_config is None:
        return {}
    if not isinstance(user_config, dict):
        raise ConfigError(f'{filename}: expected a mapping of keys to values')
    for key in user_config:
        if not isinstance(key, str):
            raise ConfigError(f'{filename}: invalid key {key!r}')
    return user_config


def apply_user_config(config: ConfigDict, user_config: ConfigDict) -> None:
    """Apply user-provided configuration to a configuration.

    Each key/value from `user_config` is validated against the existing key in
    `config` and then overrides it.

    :param dict config: The configuration to update.
    :param dict user_config: The user-provided config with overriding items.
    :raises .ConfigError: For invalid user keys or values.

    """
    for key, value in user_config.items():
        try:
            current_value = config[key]
        except KeyError:
            raise ConfigError(f'Invalid config key: {key}')
        config[key] = _coerce(key, value, type(current_value))


def _coerce(key: str, value: Any, current_type: Type) -> Any:
    if isinstance(value, current_type):
        return value
    if issubclass(current_type, (list, dict)) and isinstance(value, str):
        raise ConfigError(
            f'Failed to coerce {value!r} to {current_type.__name__} for {key}'
        )
    try:
        return current_type(value)
    except (ValueError, TypeError):
        raise ConfigError(
            f'Failed to coerce {value!r} to {current_type.__name__} for {key}'
        )


def apply_user_overrides(
    config: ConfigDict,
    overrides: Iterable[Tuple[str, str]],
    eval_locals: Optional[Dict[str, Any]] = None,
) -> None:
    """Apply ``--set KEY EXPR`` style overrides to a configuration.

    Each user key is resolved with :func:`fuzzy_lookup()`, so ``lr_g`` is
    enough to address ``'train.lr_g'``. The value expression is evaluated in a
    restricted environment and coerced to the type of the existing value.

    :param dict config: Configuration dictionary to modify.
    :param list overrides: List of user-provided (key, expression) tuples.
    :param dict eval_locals: Optional locals for :func:`eval()`.

    """
    for user_key, user_expr in overrides:
        key, current_value = fuzzy_lookup(config, user_key)
        config[key] = _safe_eval(user_expr, type(current_value), eval_locals)


def parse_user_factors(
    config: ConfigDict, user_factors, eval_locals: Optional[Dict[str, Any]] = None
) -> List[ConfigFactor]:
    """Parse each ``(user_keys, user_exprs)`` pair with :func:`parse_user_factor`.

    :func:`~gisforge.runner.run_factors()` makes one training run per
    combination of the returned factors' values.

    """
    return [
        parse_user_factor(config, keys, exprs, eval_locals)
        for keys, exprs in user_factors
    ]


def parse_user_factor(
    config: ConfigDict,
    user_keys: str,
    user_exprs: str,
    eval_locals: Optional[Dict[str, Any]] = None,
) -> ConfigFactor:
    """Turn ``--factor KEYS EXPRS`` into a ``(keys, values)`` factor.

    `user_keys` is a comma-separated list of (fuzzy) keys and `user_exprs`
    evaluates to a sequence with one entry per run: a plain value for a
    single key, a tuple with one value per key otherwise.

        >>> config = {'train.lr_g': 2e-4, 'gen.k': 9}
        >>> parse_user_factor(config, 'lr_g,k', '(1e-4, 3), (2e-4, 9)')
        (['train.lr_g', 'gen.k'], [[0.0001, 3], [0.0002, 9]])

    Values are coerced to the types found in `config`, which is not
    modified. Tuples come back as lists so the factor dumps cleanly to YAML.

    """
    resolved = [fuzzy_lookup(config, k.strip()) for k in user_keys.split(',')]
    runs = _safe_eval(user_exprs, eval_locals=eval_locals)
    if not isinstance(runs, Sequence):
        raise ConfigError(f'Factor value not a sequence "{runs}"')
    values = []
    for run_values in runs:
        if len(resolved) == 1:
            run_values = [run_values]
        values.append(
            [
                _coerce(key, value, type(current))
                for (key, current), value in zip(resolved, run_values)
            ]
        )
    return [key for key, _ in resolved], values


def factorial_config(
    base_config: ConfigDict,
    factors: Iterable[ConfigFactor],
    special_key: Optional[str] = None,
) -> Iterator[ConfigDict]:
    """Yield a deep copy of `base_config` for each combination of `factors`.

    With `special_key`, every yielded config also lists the ``[key, value]``
    pairs its combination set, under that key.

    """
    choices = [[(keys, values) for values in runs] for keys, runs in factors]
    for combination in product(*choices):
        assignments = [
            [key, value]
            for keys, values in combination
            for key, value in zip(keys, values)
        ]
        config = deepcopy(base_config)
        config.update((key, value) for key, value in assignments)
        if special_key:
            config[special_key] = assignments
        yield config


def fuzzy_match(keys: Iterable[str], fuzzy_key: str) -> str:
    """Find the key `fuzzy_key` refers to.

    Preference goes to an identical key, then to the single key whose last
    dotted part equals `fuzzy_key`, then to the single key ending with it.

    :raises KeyError: When nothing matches or the best kind of match is not
        unique.

    """
    by_leaf = []
    by_suffix = []
    for key in keys:
        if key == fuzzy_key:
            return key
        if key.rsplit('.', 1)[-1] == fuzzy_key:
            by_leaf.append(key)
        elif key.endswith(fuzzy_key):
            by_suffix.append(key)
    for matches in (by_leaf, by_suffix):
        if len(matches) == 1:
            return matches[0]
        if matches:
            raise KeyError(f'{fuzzy_key} is ambiguous')
    raise KeyError(fuzzy_key)


def fuzzy_lookup(config: ConfigDict, fuzzy_key: str) -> Tuple[str, Any]:
    """Return the ``(key, value)`` item of `config` that `fuzzy_key` names.

    :raises .ConfigError: When :func:`fuzzy_match` fails.

    """
    try:
        key = fuzzy_match(config, fuzzy_key)
    except KeyError as e:
        raise ConfigError(f'Invalid config key: {e}')
    return key, config[key]


def check_config(config: ConfigDict) -> None:
    """Validate invariants that span several configuration keys.

    :raises .ConfigError: On the first violated invariant.

    """
    levels = config['gen.levels']
    widths = config['gen.widths']
    if levels < 2:
        raise ConfigError(f'gen.levels must be >= 2, got {levels}')
    if len(widths) != levels:
        raise ConfigError(
            f'gen.widths has {len(widths)} entries for gen.levels={levels}'
        )
    if any(w <= 0 for w in widths):
        raise ConfigError(f'gen.widths must be positive, got {widths}')
    if config['gen.k'] < 1:
        raise ConfigError(f'gen.k must be >= 1, got {config["gen.k"]}')
    if config['gen.composite'] not in ('identity', 'hard'):
        raise ConfigError(f'unknown gen.composite: {config["gen.composite"]}')

    height, width = config['forge.size']
    divisor = 2 ** (levels - 1)
    if height % divisor or width % divisor:
        raise ConfigError(
            f'forge.size {height}x{width} must be divisible by {divisor} '
            f'for gen.levels={levels}'
        )
    if height % 16 or width % 16:
        raise ConfigError(
            f'forge.size {height}x{width} must be divisible by 16 for the '
            f'patch discriminator'
        )
    if len(config['disc.widths']) != 5 or config['disc.widths'][-1] != 1:
        raise ConfigError('disc.widths must list 5 layers ending with 1 channel')

    if config['train.steps'] < 0:
        raise ConfigError('train.steps must be >= 0')
    for key in ('train.batch_size', 'train.checkpoint_every', 'train.log_every'):
        if config[key] <= 0:
            raise ConfigError(f'{key} must be positive')
    for key in ('train.lr_g', 'train.lr_d'):
        if config[key] < 0:
            raise ConfigError(f'{key} must be >= 0')
    if config['train.dtype'] not in ('float32', 'float64'):
        raise ConfigError(f'unknown train.dtype: {config["train.dtype"]}')
    for modality in config['train.exclude']:
        if modality == 'mask':
            raise ConfigError('the mask cannot be excluded: the losses require it')
        if modality not in ABLATABLE_MODALITIES:
            raise ConfigError(f'unknown modality in train.exclude: {modality}')
    if config['loss.gamma'] < 0 or config['loss.rho'] <= 0:
        raise ConfigError('loss.gamma must be >= 0 and loss.rho > 0')


#: Keys holding filesystem paths given relative to the invoking directory.
PATH_KEYS = (
    'data.root',
    'train.dataset',
    'train.real_dir',
    'train.resume',
    'eval.dataset',
    'perception.weights',
)


def absolutize_paths(config: ConfigDict) -> None:
    """Make the non-empty path values of `config` absolute.

    Runs change into their workspace directory; paths are resolved against
    the current directory before that happens.

    """
    for key in PATH_KEYS:
        if config.get(key):
            config[key] = os.path.abspath(config[key])


#: Names visible to ``--set`` and ``--factor`` expressions.
_EVAL_NAMES: Dict[str, Any] = {
    name: getattr(builtins, name)
    for name in (
        'abs bool dict float frozenset int len list max min range round set str '
        'sum tuple zip True False'
    ).split()
}


def _safe_eval(
    expr: str,
    coerce_type: Optional[Type] = None,
    eval_locals: Optional[Dict[str, Any]] = None,
) -> Any:
    """Evaluate a user expression without access to builtins.

    With `coerce_type` the result is converted to that type. A str-typed
    target also accepts bare words, so ``--set palette default`` works
    without quoting, as does a word that names one of the allowed builtins.

    """
    names = _EVAL_NAMES if eval_locals is None else eval_locals
    wants_str = coerce_type is not None and issubclass(coerce_type, str)
    try:
        value = eval(expr, {'__builtins__': None}, names)
    except BaseException:
        if not wants_str:
            raise ConfigError(f'Failed evaluation of expression "{expr}"')
        value = expr
    if coerce_type is None or isinstance(value, coerce_type):
        return value
    if expr in names:
        return expr if wants_str else _coerce_expr(expr, expr, coerce_type)
    return _coerce_expr(expr, value, coerce_type)


def _coerce_expr(expr: str, value: Any, coerce_type: Type) -> Any:
    try:
        return coerce_type(value)
    except (ValueError, TypeError):
        quote = "'" if expr.startswith('"') else '"'
        raise ConfigError(
            f'Failed to coerce expression {quote}{expr}{quote} to '
            f'{coerce_type.__name__}'
        )
