import json
import os
import shutil

from PIL import Image
import numpy as np
import pytest

from gisforge.config import ConfigError, presets
from gisforge.evaluate import (
    GALLERY_GAP,
    EvalReport,
    ExperimentTop,
    ablation_ordering,
    augment,
    emit_gallery,
    evaluate,
    exclusion_label,
    format_ablation,
    gallery_image,
    held_out_dataset,
    input_panels,
    run_ablation,
    run_diversity,
    sample_metrics,
    target_oracle,
)
from gisforge.gbuffer import (
    DatasetError,
    MaterialPalette,
    ValidationError,
    open_dataset,
    read_sample,
    write_manifest,
)
from gisforge.runner import run
from gisforge.trainer import fit
from gisforge.util import read_json, write_json

pytestmark = pytest.mark.usefixtures('cleandir')


@pytest.fixture
def checkpoint(smoke_config):
    smoke_config['train.steps'] = 0
    return fit(smoke_config)['train.checkpoint']


def _mask(rows=1, size=2):
    mask = np.zeros((size, size), dtype=np.float32)
    mask[:rows] = 1
    return mask


def test_sample_metrics():
    target = np.zeros((2, 2, 3))
    outputs = np.stack([np.full((2, 2, 3), 0.1), np.full((2, 2, 3), 0.5)])
    m = sample_metrics('s', target, outputs, _mask())
    assert m.masked_l1 == pytest.approx([0.1, 0.5])
    assert m.best_k == 0
    assert m.best_l1 == pytest.approx(0.1)
    assert m.psnr == pytest.approx(20.0)
    assert m.spread == pytest.approx(0.4)
    assert m.background_l1 == pytest.approx(0.1)


def test_sample_metrics_background_of_best():
    target = np.zeros((2, 2, 3))
    outputs = np.zeros((2, 2, 2, 3))
    outputs[0, 0] = 0.3
    outputs[1, 1] = 0.2
    m = sample_metrics('s', target, outputs, _mask())
    assert m.best_k == 1
    assert m.background_l1 == pytest.approx(0.2)


def test_sample_metrics_exact_match_is_capped():
    target = np.random.default_rng(0).random((4, 4, 3))
    m = sample_metrics('s', target, target[None], _mask(size=4), psnr_cap=50.0)
    assert m.psnr == 50.0
    assert m.masked_l1 == [0.0]


def test_sample_metrics_single_output_has_no_spread():
    target = np.zeros((2, 2, 3))
    m = sample_metrics('s', target, np.ones((1, 2, 2, 3)), _mask())
    assert m.spread == 0.0
    assert m.psnr == 0.0


def test_sample_metrics_tie():
    target = np.zeros((2, 2, 3))
    outputs = np.full((3, 2, 2, 3), 0.25)
    assert sample_metrics('s', target, outputs, _mask()).best_k == 0


def test_sample_metrics_no_foreground():
    target = np.zeros((2, 2, 3))
    outputs = np.stack([np.full((2, 2, 3), 0.2), np.zeros((2, 2, 3))])
    m = sample_metrics('s', target, outputs, np.zeros((2, 2)))
    assert not m.has_foreground
    assert m.best_l1 is None and m.psnr is None and m.spread is None
    assert m.background_l1 == pytest.approx(0.2)


def test_report_aggregate_skips_empty_masks():
    target = np.zeros((2, 2, 3))
    report = EvalReport(k=1)
    report.samples.append(
        sample_metrics('a', target, np.full((1, 2, 2, 3), 0.1), _mask())
    )
    report.samples.append(
        sample_metrics('b', target, np.full((1, 2, 2, 3), 0.3), np.zeros((2, 2)))
    )
    agg = report.aggregate
    assert agg['samples'] == 2
    assert agg['foreground_samples'] == 1
    assert agg['masked_l1'] == pytest.approx(0.1)
    assert agg['background_l1'] == pytest.approx(0.2)
    table = report.table().splitlines()
    assert len(table) == 4
    assert table[2].startswith('b') and '-' in table[2]
    assert table[-1].startswith('mean')
    report.write('eval.json')
    with open('eval.json') as f:
        assert json.load(f)['aggregate'] == agg


def test_target_oracle(tiny_dataset):
    report = evaluate(target_oracle, tiny_dataset, batch_size=3)
    assert report.k == 1
    assert [s.name for s in report.samples] == [
        '000000',
        '000001',
        '000002',
        '000003',
    ]
    agg = report.aggregate
    assert agg['foreground_samples'] >= 1
    assert agg['masked_l1'] == 0.0
    assert agg['psnr'] == 99.0
    assert agg['spread'] == 0.0
    assert agg['background_l1'] == 0.0


def test_evaluate_zero_head(smoke_config, tiny_dataset):
    smoke_config['gen.zero_head'] = True
    smoke_config['train.steps'] = 0
    path = fit(smoke_config)['train.checkpoint']
    report = evaluate(path, tiny_dataset, limit=2)
    assert report.k == 2
    assert len(report.samples) == 2
    dataset = open_dataset(tiny_dataset)
    for i, metrics in enumerate(report.samples):
        sample = dataset[i]
        if not metrics.has_foreground:
            continue
        fg = sample.foreground
        expected = np.abs(sample.target.astype(np.float64) - 0.5)[fg].mean()
        assert metrics.masked_l1 == pytest.approx([expected, expected])
        assert metrics.spread == 0.0


def test_evaluate_empty_dataset(tmpdir):
    root = str(tmpdir.mkdir('empty'))
    write_manifest(
        root,
        {'palette': list(MaterialPalette().names), 'size': [32, 32], 'samples': []},
    )
    with pytest.raises(DatasetError):
        evaluate(target_oracle, root)


def test_evaluate_missing_target(tiny_dataset):
    shutil.copytree(tiny_dataset, 'copy')
    info_path = os.path.join('copy', '000002', 'sample.json')
    info = read_json(info_path)
    info['has_target'] = False
    write_json(info_path, info)
    with pytest.raises(ValidationError) as e:
        evaluate(target_oracle, 'copy')
    assert 'sample 2' in str(e.value)


def test_input_panels(tiny_dataset):
    sample = open_dataset(tiny_dataset)[0]
    panels = input_panels(sample)
    assert len(panels) == 4
    assert all(p.size == (32, 32) and p.mode == 'RGB' for p in panels)


def test_gallery(tiny_dataset):
    paths = emit_gallery(target_oracle, tiny_dataset, 'gallery', limit=2)
    assert [os.path.basename(p) for p in paths] == ['000000.png', '000001.png']
    with Image.open(paths[0]) as image:
        assert image.size == (6 * 32 + 5 * GALLERY_GAP, 32)
    with open(os.path.join('gallery', 'gallery.json')) as f:
        index = json.load(f)
    assert index['layout_version'] == 1
    assert index['panels'][-2:] == ['target', 'output0']
    assert index['images'] == ['000000.png', '000001.png']


def test_gallery_limit_on_open_dataset(tiny_dataset):
    dataset = open_dataset(tiny_dataset)
    paths = emit_gallery(target_oracle, dataset, 'gallery', limit=1)
    assert [os.path.basename(p) for p in paths] == ['000000.png']
    assert len(dataset) == 4
    assert len(evaluate(target_oracle, dataset, limit=3).samples) == 3


def test_gallery_deterministic(tiny_dataset):
    first = emit_gallery(target_oracle, tiny_dataset, 'a', limit=1)[0]
    second = emit_gallery(target_oracle, tiny_dataset, 'b', limit=1)[0]
    with open(first, 'rb') as f1, open(second, 'rb') as f2:
        assert f1.read() == f2.read()


def test_gallery_no_foreground(tiny_dataset):
    sample = open_dataset(tiny_dataset)[0]
    empty = sample.replace(mask=np.zeros_like(sample.mask))
    grid = np.asarray(gallery_image(empty, target_oracle([sample])[0]))
    mask_x = 3 * (32 + GALLERY_GAP)
    mask_panel = grid[:, mask_x : mask_x + 32]
    assert (mask_panel[..., 0] > 0).any()
    assert (mask_panel[..., 1] == 0).all()


def test_gallery_from_checkpoint(checkpoint, tiny_dataset):
    paths = emit_gallery(checkpoint, tiny_dataset, 'gallery', limit=1)
    with Image.open(paths[0]) as image:
        assert image.size == (7 * 32 + 6 * GALLERY_GAP, 32)


def test_experiment_top(smoke_config, tiny_dataset, heldout_dataset):
    smoke_config['train.steps'] = 2
    result = run(smoke_config, ExperimentTop)
    assert result['run.exception'] is None
    assert result['eval']['samples'] == 4
    assert result['eval.dataset'] == os.path.realpath(heldout_dataset)
    assert result['eval.dataset'] != os.path.realpath(tiny_dataset)
    with open(os.path.join('ws', 'eval.json')) as f:
        assert json.load(f)['aggregate'] == result['eval']


def test_exclusion_label():
    assert exclusion_label([]) == 'none'
    assert exclusion_label(['normals']) == 'normals'


ABLATION = {
    'none': {1: {'masked_l1': 0.10}, 2: {'masked_l1': 0.12}},
    'normals': {1: {'masked_l1': 0.20}, 2: {'masked_l1': 0.18}},
    'depth': {1: {'masked_l1': 0.11}, 2: {'masked_l1': 0.12}},
}


def test_ablation_ordering():
    assert ablation_ordering(ABLATION) == {'normals_worse': True, 'depth_minor': True}
    flipped = dict(ABLATION, depth={1: {'masked_l1': 0.4}, 2: {'masked_l1': 0.12}})
    assert ablation_ordering(flipped) == {
        'normals_worse': True,
        'depth_minor': False,
    }
    with pytest.raises(ValueError):
        ablation_ordering({'none': ABLATION['none']})


def test_format_ablation():
    lines = format_ablation(ABLATION).splitlines()
    assert 'seed 1' in lines[0] and 'seed 2' in lines[0]
    assert lines[1].split() == ['none', '0.1000', '0.1200']


def test_ablation_rejects_mask(smoke_config):
    with pytest.raises(ConfigError):
        run_ablation(smoke_config, ['mask'])


def test_diversity_needs_several_outputs(smoke_config):
    with pytest.raises(ConfigError):
        run_diversity(smoke_config, k=1)


def test_held_out_dataset(smoke_config, tiny_dataset, heldout_dataset):
    assert held_out_dataset(smoke_config) == os.path.realpath(heldout_dataset)
    smoke_config['eval.dataset'] = ''
    with pytest.raises(ConfigError):
        held_out_dataset(smoke_config)
    smoke_config['eval.dataset'] = os.path.join(tiny_dataset, '.')
    with pytest.raises(ConfigError) as e:
        held_out_dataset(smoke_config)
    assert 'training dataset' in str(e.value)


@pytest.mark.parametrize('harness', [run_ablation, run_diversity])
def test_experiments_refuse_training_data(smoke_config, tiny_dataset, harness):
    smoke_config['eval.dataset'] = tiny_dataset
    with pytest.raises(ConfigError):
        harness(smoke_config)
    assert not os.path.exists('ws')


@pytest.mark.slow
def test_run_ablation(smoke_config):
    table = run_ablation(smoke_config, ['normals', 'depth'], seeds=[1, 2], jobs=2)
    assert sorted(table) == ['depth', 'none', 'normals']
    assert all(sorted(row) == [1, 2] for row in table.values())
    assert os.path.isfile(os.path.join('ws', '5', 'eval.json'))
    assert set(ablation_ordering(table)) == {'normals_worse', 'depth_minor'}


@pytest.mark.slow
def test_run_diversity(smoke_config):
    summary = run_diversity(smoke_config, k=3, jobs=2)
    assert summary['control_spread'] == 0.0
    assert summary['spread'] >= 0.0
    assert len(summary['results']) == 2


def test_augment(checkpoint, tiny_ranges):
    doc = augment(checkpoint, 3, 5, 'aug', ranges=tiny_ranges)
    assert [s['name'] for s in doc['samples']] == ['000000', '000001', '000002']
    assert all(s['k'] in (0, 1) for s in doc['samples'])
    with open(os.path.join('aug', 'augment.json')) as f:
        assert json.load(f) == doc
    for entry in doc['samples']:
        directory = os.path.join('aug', entry['name'])
        with Image.open(os.path.join(directory, 'image.png')) as image:
            assert image.size == (32, 32)
        assert read_sample(directory).target is None


def test_augment_pick_index(checkpoint, tiny_ranges):
    doc = augment(checkpoint, 2, 5, 'aug', ranges=tiny_ranges, pick='index', index=1)
    assert [s['k'] for s in doc['samples']] == [1, 1]
    with pytest.raises(ConfigError):
        augment(checkpoint, 1, 5, 'bad', ranges=tiny_ranges, pick='index', index=2)
    with pytest.raises(ConfigError):
        augment(checkpoint, 1, 5, 'bad', ranges=tiny_ranges, pick='best')


def test_augment_relabel_and_paste(checkpoint, tiny_ranges):
    palette = MaterialPalette()
    glass = palette.index('glass')
    doc = augment(
        checkpoint,
        4,
        9,
        'aug',
        ranges=tiny_ranges,
        relabel={'glass': 'matte-red'},
        paste=True,
    )
    assert doc['relabel'] == {str(glass): palette.index('matte-red')}
    assert doc['paste'] is True
    for entry in doc['samples']:
        sample = read_sample(os.path.join('aug', entry['name']))
        assert sample.materials[..., glass].sum() == 0


@pytest.mark.slow
def test_desk_masked_l1(desk_config, baseline):
    expected = baseline['desk']
    trained = run(dict(desk_config), ExperimentTop)
    untrained_config = dict(desk_config)
    untrained_config.update({'train.steps': 0, 'run.workspace': 'untrained'})
    untrained = run(untrained_config, ExperimentTop)
    masked_l1 = trained['eval']['masked_l1']
    assert masked_l1 <= expected['masked_l1_max']
    assert masked_l1 < untrained['eval']['masked_l1']
    baseline.check('desk', 'masked_l1', masked_l1)
    baseline.check('desk', 'untrained_masked_l1', untrained['eval']['masked_l1'])
    baseline.record('desk', 'runtime_s', trained['run.runtime'])


@pytest.mark.slow
def test_desk_diversity(desk_config, baseline):
    expected = baseline['diversity']
    desk_config.update(presets.resolve(expected['preset']))
    summary = run_diversity(desk_config, k=expected['k'])
    assert summary['control_spread'] == expected['control_spread']
    assert summary['spread'] >= expected['spread_min']
    assert summary['spread'] > summary['control_spread']
    baseline.check('diversity', 'spread', summary['spread'])


@pytest.mark.slow
def test_desk_ablation_ordering(desk_config, baseline):
    expected = baseline['ablation']
    table = run_ablation(desk_config, expected['modalities'], expected['seeds'])
    assert sorted(table['none']) == sorted(expected['seeds'])
    assert ablation_ordering(table) == {
        'normals_worse': expected['expect']['normals_worse'],
        'depth_minor': expected['expect']['depth_minor'],
    }
