import os

import pytest
import yaml

from gisforge.config import default_config, presets
from gisforge.forge import SceneRanges, generate_dataset

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def pytest_addoption(parser):
    parser.addoption(
        '--run-slow', action='store_true', help='run the long training tests'
    )
    parser.addoption(
        '--record-baseline',
        metavar='FILE',
        help='write the measurements of the long training tests to FILE',
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def cleandir(tmpdir):
    origin = os.getcwd()
    tmpdir.chdir()
    yield None
    os.chdir(origin)


@pytest.fixture(scope='session')
def tiny_ranges():
    return SceneRanges(size=(32, 32), primitives=(1, 2))


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory, tiny_ranges):
    """Four 32x32 oracle samples shared by the whole session."""
    root = str(tmp_path_factory.mktemp('data') / 'tiny')
    generate_dataset(4, 3, root, tiny_ranges, workers=1)
    return root


@pytest.fixture(scope='session')
def heldout_dataset(tmp_path_factory, tiny_ranges):
    """Four more samples from another seed, for scoring experiments."""
    root = str(tmp_path_factory.mktemp('data') / 'heldout')
    generate_dataset(4, 8, root, tiny_ranges, workers=1)
    return root


@pytest.fixture
def smoke_config(tiny_dataset, heldout_dataset):
    config = default_config()
    config.update(presets.resolve('smoke'))
    config['forge.primitives'] = [1, 2]
    config['train.dataset'] = tiny_dataset
    config['eval.dataset'] = heldout_dataset
    config['run.workspace'] = 'ws'
    return config


class Baseline:
    """Thresholds of the long training tests and their reference measurements.

    Measurements start out null in ``baseline.yaml``; a null measurement
    leaves only the threshold checks in force.

    """

    def __init__(self, doc):
        self.doc = doc
        self.recorded = {}

    def __getitem__(self, section):
        return self.doc[section]

    def record(self, section, key, value):
        self.recorded.setdefault(section, {})[key] = value

    def check(self, section, key, value):
        """Record `value` and compare it with the measured reference, if any."""
        self.record(section, key, value)
        measured = self.doc[section]['measured'].get(key)
        if measured is not None:
            tolerance = self.doc[section].get('tolerance', 0.2)
            assert value == pytest.approx(measured, rel=tolerance, abs=1e-4)


@pytest.fixture(scope='session')
def baseline(request):
    with open(os.path.join(ROOT, 'baseline.yaml')) as f:
        reference = Baseline(yaml.safe_load(f))
    yield reference
    path = request.config.getoption('--record-baseline')
    if path and reference.recorded:
        with open(path, 'w') as f:
            yaml.safe_dump(reference.recorded, f)


@pytest.fixture(scope='session')
def desk_data(tmp_path_factory, baseline):
    """Desk-scale training set and a held-out set from another seed."""
    config = default_config()
    ranges = SceneRanges.from_config(config)
    root = tmp_path_factory.mktemp('desk')
    train = str(root / 'train')
    heldout = str(root / 'heldout')
    generate_dataset(baseline['desk']['samples'], config['data.seed'], train, ranges)
    generate_dataset(200, config['data.seed'] + 1000, heldout, ranges)
    return train, heldout


@pytest.fixture
def desk_config(desk_data, baseline):
    config = default_config()
    config['train.dataset'], config['eval.dataset'] = desk_data
    config['train.steps'] = baseline['desk']['steps']
    config['run.workspace'] = 'ws'
    return config
