"""Evaluation metrics, galleries and the experiment harnesses.

Image metrics are computed per sample over the object mask:

 - masked L1 of every output and the best output (argmin, lowest index on
   ties);
 - masked PSNR of the best output with peak 1.0, capped for exact matches;
 - diversity spread, the mean masked L1 between all pairs of outputs;
 - background L1 of the best output.

Samples without foreground carry no masked metrics and are left out of the
masked aggregates. The ablation and diversity harnesses train independent
models with :func:`~gisforge.runner.run_factors` and evaluate each one when
its training run completes.

"""
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Union
import math
import os

from PIL import Image, ImageDraw
import numpy as np

from .config import ConfigDict, ConfigError
from .forge import (
    SceneRanges,
    backdrop_only,
    derive_seed,
    rasterize_gbuffer,
    sample_scene,
)
from .gbuffer import (
    DatasetError,
    GBufferSample,
    MaterialPalette,
    SampleDataset,
    ValidationError,
    encode_depth,
    material_labels,
    open_dataset,
    paste_object,
    quantize,
    relabel_materials,
    sample_name,
    write_sample,
)
from .runner import ResultDict, run_factors
from .trainer import Synthesizer, TrainTop
from .util import write_json

Model = Callable[[Sequence[GBufferSample]], np.ndarray]

#: Bumped whenever the panel arrangement of gallery images changes.
GALLERY_LAYOUT_VERSION = 1

GALLERY_GAP = 2

#: Display colors of material ids, cycled for larger palettes.
MATERIAL_COLORS = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)


@dataclass
class SampleMetrics:
    name: str
    #: Masked L1 of each output; None without foreground.
    masked_l1: Optional[List[float]]
    best_k: Optional[int]
    psnr: Optional[float]
    spread: Optional[float]
    background_l1: float

    @property
    def has_foreground(self) -> bool:
        return self.masked_l1 is not None

    @property
    def best_l1(self) -> Optional[float]:
        if self.masked_l1 is None or self.best_k is None:
            return None
        return self.masked_l1[self.best_k]


def sample_metrics(
    name: str,
    target: np.ndarray,
    outputs: np.ndarray,
    mask: np.ndarray,
    psnr_cap: float = 99.0,
) -> SampleMetrics:
    """Metrics of ``K x H x W x 3`` `outputs` against an ``H x W x 3`` target."""
    target = np.asarray(target, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    fg = np.asarray(mask) > 0.5
    bg = ~fg
    diff = np.abs(outputs - target)
    if not fg.any():
        background_l1 = float(diff[0][bg].mean())
        return SampleMetrics(name, None, None, None, None, background_l1)
    l1 = [float(d[fg].mean()) for d in diff]
    best = int(np.argmin(l1))
    mse = float(((outputs[best] - target)[fg] ** 2).mean())
    psnr = psnr_cap if mse == 0 else min(psnr_cap, 10 * math.log10(1 / mse))
    pairs = [
        float(np.abs(outputs[j] - outputs[k])[fg].mean())
        for j, k in combinations(range(len(outputs)), 2)
    ]
    spread = float(np.mean(pairs)) if pairs else 0.0
    background_l1 = float(diff[best][bg].mean()) if bg.any() else 0.0
    return SampleMetrics(name, l1, best, psnr, spread, background_l1)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    k: int
    psnr_cap: float = 99.0
    samples: List[SampleMetrics] = field(default_factory=list)

    @property
    def aggregate(self) -> Dict[str, Any]:
        present = [s for s in self.samples if s.has_foreground]
        return {
            'samples': len(self.samples),
            'foreground_samples': len(present),
            'masked_l1': _mean([s.best_l1 for s in present]),  # type: ignore
            'psnr': _mean([s.psnr for s in present]),  # type: ignore
            'spread': _mean([s.spread for s in present]),  # type: ignore
            'background_l1': _mean([s.background_l1 for s in self.samples]),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': self.k,
            'psnr_cap': self.psnr_cap,
            'aggregate': self.aggregate,
            'samples': [asdict(s) for s in self.samples],
        }

    def write(self, path: str) -> None:
        write_json(path, self.to_dict())

    def table(self) -> str:
        """Human-readable per-sample table followed by the aggregate row."""

        def cell(value: Optional[float], fmt: str = '{:9.4f}') -> str:
            return f'{"-":>9}' if value is None else fmt.format(value)

        lines = [
            f'{"sample":<10} {"best_k":>6} {"l1":>9} {"psnr":>9} '
            f'{"spread":>9} {"bg_l1":>9}'
        ]
        for s in self.samples:
            best = '-' if s.best_k is None else str(s.best_k)
            lines.append(
                f'{s.name:<10} {best:>6} {cell(s.best_l1)} '
                f'{cell(s.psnr, "{:9.2f}")} {cell(s.spread)} '
                f'{cell(s.background_l1)}'
            )
        agg = self.aggregate
        lines.append(
            f'{"mean":<10} {"":>6} {cell(agg["masked_l1"])} '
            f'{cell(agg["psnr"], "{:9.2f}")} {cell(agg["spread"])} '
            f'{cell(agg["background_l1"])}'
        )
        return '\n'.join(lines)


def target_oracle(samples: Sequence[GBufferSample]) -> np.ndarray:
    """A model that returns each sample's own target as its single output."""
    return np.stack([s.target for s in samples])[:, None]  # type: ignore


def _as_model(model: Union[str, Synthesizer, Model]) -> Model:
    if isinstance(model, str):
        return Synthesizer(model)
    return model


def _as_dataset(dataset: Union[str, SampleDataset], limit: int = 0) -> SampleDataset:
    if isinstance(dataset, str):
        return open_dataset(dataset, limit)
    return dataset.head(limit)


def held_out_dataset(config: ConfigDict) -> str:
    """Absolute path of 'eval.dataset' for scoring experiment runs.

    :raises ConfigError: When 'eval.dataset' is empty or is the training
        dataset.

    """
    if not config['eval.dataset']:
        raise ConfigError('experiments need a held-out eval.dataset')
    eval_root = os.path.realpath(config['eval.dataset'])
    if eval_root == os.path.realpath(config['train.dataset']):
        raise ConfigError(f'eval.dataset {eval_root} is the training dataset')
    return eval_root


def evaluate(
    model: Union[str, Synthesizer, Model],
    dataset: Union[str, SampleDataset],
    batch_size: int = 16,
    psnr_cap: float = 99.0,
    limit: int = 0,
) -> EvalReport:
    """Evaluate a checkpoint (or any model callable) on a dataset with targets.

    :raises DatasetError: For an empty dataset.
    :raises ValidationError: For a sample without target.

    """
    model = _as_model(model)
    dataset = _as_dataset(dataset, limit)
    if len(dataset) == 0:
        raise DatasetError(-1, f'empty dataset: {dataset.root}')
    report: Optional[EvalReport] = None
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        samples = [dataset[i] for i in indices]
        for i, sample in zip(indices, samples):
            if sample.target is None:
                raise ValidationError(f'sample {i} has no target')
        outputs = model(samples)
        if report is None:
            report = EvalReport(k=outputs.shape[1], psnr_cap=psnr_cap)
        for i, sample, out in zip(indices, samples, outputs):
            name = dataset.entries[i]['name']
            report.samples.append(
                sample_metrics(name, sample.target, out, sample.mask, psnr_cap)
            )
    assert report is not None
    return report


def _panel(image: np.ndarray) -> Image.Image:
    return Image.fromarray(quantize(image)).convert('RGB')


def input_panels(sample: GBufferSample) -> List[Image.Image]:
    """Visualizations of normals, disparity, materials and mask."""
    normals = (np.asarray(sample.normals) + 1) / 2 * sample.mask[..., None]
    disparity = encode_depth(sample.depth, sample.mask, sample.z_near)
    labels = material_labels(sample.materials)
    colors = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for material in np.unique(labels):
        if material != 255:
            colors[labels == material] = MATERIAL_COLORS[
                int(material) % len(MATERIAL_COLORS)
            ]
    return [
        _panel(normals),
        _panel(np.repeat(disparity[..., None], 3, axis=-1)),
        Image.fromarray(colors),
        _panel(np.repeat(np.asarray(sample.mask)[..., None], 3, axis=-1)),
    ]


def gallery_image(sample: GBufferSample, outputs: np.ndarray) -> Image.Image:
    """Grid row: inputs | target | K outputs."""
    panels = input_panels(sample)
    if sample.target is not None:
        panels.append(_panel(sample.target))
    else:
        panels.append(Image.new('RGB', (sample.width, sample.height)))
    panels += [_panel(out) for out in outputs]
    width = len(panels) * sample.width + (len(panels) - 1) * GALLERY_GAP
    grid = Image.new('RGB', (width, sample.height), (255, 255, 255))
    for i, panel in enumerate(panels):
        grid.paste(panel, (i * (sample.width + GALLERY_GAP), 0))
    if not sample.foreground.any():
        mask_x = 3 * (sample.width + GALLERY_GAP)
        ImageDraw.Draw(grid).text((mask_x + 2, 2), 'no foreground', fill=(255, 0, 0))
    return grid


def emit_gallery(
    model: Union[str, Synthesizer, Model],
    dataset: Union[str, SampleDataset],
    out_dir: str,
    limit: int = 16,
) -> List[str]:
    """Write one PNG grid per sample and a ``gallery.json`` index.

    :returns: Paths of the written grids.

    """
    model = _as_model(model)
    dataset = _as_dataset(dataset, limit)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    k = 0
    for i in range(len(dataset)):
        sample = dataset[i]
        outputs = model([sample])[0]
        k = len(outputs)
        path = os.path.join(out_dir, f'{dataset.entries[i]["name"]}.png')
        gallery_image(sample, outputs).save(path, format='PNG')
        paths.append(path)
    write_json(
        os.path.join(out_dir, 'gallery.json'),
        {
            'layout_version': GALLERY_LAYOUT_VERSION,
            'panels': ['normals', 'disparity', 'materials', 'mask', 'target']
            + [f'output{j}' for j in range(k)],
            'images': [os.path.basename(p) for p in paths],
        },
    )
    return paths


class ExperimentTop(TrainTop):
    """Training run that evaluates its final checkpoint."""

    def post_run_hook(self) -> None:
        super().post_run_hook()
        config = self.env.config
        self.eval_root = held_out_dataset(config)
        self.report = evaluate(
            self.checkpointer.last_path,  # type: ignore
            self.eval_root,
            config['eval.batch_size'],
            config['eval.psnr_cap'],
        )
        self.report.write(config['eval.report.file'])
        self.info(f'masked L1 {self.report.aggregate["masked_l1"]}')

    def get_result_hook(self, result: ResultDict) -> None:
        super().get_result_hook(result)
        result['eval'] = self.report.aggregate
        result['eval.dataset'] = self.eval_root


def exclusion_label(exclude: Sequence[str]) -> str:
    return ','.join(exclude) if exclude else 'none'


AblationTable = Dict[str, Dict[int, Dict[str, Any]]]


def run_ablation(
    config: ConfigDict,
    modalities: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    jobs: Optional[int] = None,
) -> AblationTable:
    """Train one model per excluded modality and seed, plus the baseline.

    :returns: Evaluation aggregates keyed by exclusion label (``'none'`` for
        the baseline) and seed.
    :raises ConfigError: When the mask is to be excluded or
        eval.dataset is not held out.

    """
    modalities = list(config['ablate.modalities'] if modalities is None else modalities)
    seeds = list(config['ablate.seeds'] if seeds is None else seeds)
    if 'mask' in modalities:
        raise ConfigError('the mask cannot be ablated: the losses require it')
    held_out_dataset(config)
    exclusions: List[List[str]] = [[]] + [[m] for m in modalities]
    factors = [
        (['train.exclude'], [[e] for e in exclusions]),
        (['run.seed'], [[s] for s in seeds]),
    ]
    results = run_factors(config, factors, ExperimentTop, jobs=jobs)
    table: AblationTable = {}
    for result in results:
        if result.get('run.exception'):
            raise RuntimeError(
                f'ablation run {result["config"]["meta.run.index"]} failed: '
                f'{result["run.exception"]}'
            )
        run_config = result['config']
        label = exclusion_label(run_config['train.exclude'])
        table.setdefault(label, {})[run_config['run.seed']] = result['eval']
    return table


def ablation_ordering(table: AblationTable) -> Dict[str, bool]:
    """Check the ablation claims on every seed.

    ``'normals_worse'``: dropping normals increases masked L1.
    ``'depth_minor'``: dropping depth changes masked L1 by less than dropping
    normals does.

    """
    for label in ('none', 'normals'):
        if label not in table:
            raise ValueError(f'ablation table lacks the {label!r} row')
    normals_worse = True
    depth_minor = True
    for seed, base in table['none'].items():
        full = base['masked_l1']
        normals = table['normals'][seed]['masked_l1'] - full
        normals_worse &= normals > 0
        if 'depth' in table:
            depth = abs(table['depth'][seed]['masked_l1'] - full)
            depth_minor &= depth < normals
    return {'normals_worse': normals_worse, 'depth_minor': depth_minor}


def format_ablation(table: AblationTable) -> str:
    seeds = sorted({seed for row in table.values() for seed in row})
    lines = [f'{"excluded":<10}' + ''.join(f' {"seed " + str(s):>9}' for s in seeds)]
    for label, row in table.items():
        values = ''.join(f' {row[s]["masked_l1"]:9.4f}' for s in seeds)
        lines.append(f'{label:<10}{values}')
    return '\n'.join(lines)


def run_diversity(
    config: ConfigDict, k: int = 3, jobs: Optional[int] = None
) -> Dict[str, Any]:
    """Train a K-output model and a single-output control, compare spreads.

    The control's outputs duplicated K ways have spread 0 by construction.

    :raises ConfigError: For k < 2 or when 'eval.dataset' is not held out.

    """
    if k < 2:
        raise ConfigError(f'the diversity comparison needs k >= 2, got {k}')
    held_out_dataset(config)
    factors = [(['gen.k'], [[k], [1]])]
    results = run_factors(config, factors, ExperimentTop, jobs=jobs)
    spreads = {}
    for result in results:
        if result.get('run.exception'):
            raise RuntimeError(f'diversity run failed: {result["run.exception"]}')
        spreads[result['config']['gen.k']] = result['eval']['spread']
    return {
        'k': k,
        'spread': spreads[k],
        'control_spread': spreads[1],
        'results': [r['eval'] for r in results],
    }


def augment(
    model: Union[str, Synthesizer],
    n: int,
    seed: int,
    out_dir: str,
    ranges: Optional[SceneRanges] = None,
    palette: Optional[MaterialPalette] = None,
    pick: str = 'random',
    index: int = 0,
    relabel: Optional[Dict[Any, Any]] = None,
    paste: bool = False,
) -> Dict[str, Any]:
    """Create an augmented dataset with a trained model.

    Every entry is a fresh oracle G-buffer (rasterized only, never shaded),
    optionally with relabeled materials and with its object pasted at a
    random location over another backdrop. One of the K synthesized frames
    is kept, chosen at random or by `index`, and written as ``image.png`` with
    the instance mask ``mask.png`` and the conditioning G-buffer.

    :returns: The ``augment.json`` index.

    """
    synthesizer = model if isinstance(model, Synthesizer) else Synthesizer(model)
    ranges = ranges or SceneRanges()
    palette = palette or MaterialPalette()
    if pick not in ('random', 'index'):
        raise ConfigError(f'unknown augment.pick: {pick}')
    if pick == 'index' and not 0 <= index < synthesizer.k:
        raise ConfigError(f'augment.index {index} outside 0..{synthesizer.k - 1}')
    mapping = {
        (palette.index(s) if isinstance(s, str) else int(s)): (
            palette.index(d) if isinstance(d, str) else int(d)
        )
        for s, d in (relabel or {}).items()
    }
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        sample_seed = derive_seed(seed, i)
        rng = np.random.default_rng(sample_seed)
        sample = rasterize_gbuffer(sample_scene(sample_seed, ranges, palette))
        if mapping:
            sample = relabel_materials(sample, mapping)
        if paste:
            h, w = ranges.size
            offset = (
                int(rng.integers(-h // 4, h // 4 + 1)),
                int(rng.integers(-w // 4, w // 4 + 1)),
            )
            backdrop = backdrop_only(int(rng.integers(2 ** 31)), ranges)
            sample = paste_object(sample, backdrop, offset)
        outputs = synthesizer([sample])[0]
        chosen = int(rng.integers(len(outputs))) if pick == 'random' else index
        directory = os.path.join(out_dir, sample_name(i))
        write_sample(sample, directory, palette, meta={'seed': sample_seed})
        Image.fromarray(quantize(outputs[chosen])).save(
            os.path.join(directory, 'image.png'), format='PNG'
        )
        entries.append({'name': sample_name(i), 'seed': sample_seed, 'k': chosen})
    index_doc = {
        'seed': seed,
        'size': list(ranges.size),
        'palette': list(palette.names),
        'relabel': {str(s): d for s, d in mapping.items()},
        'paste': paste,
        'samples': entries,
    }
    write_json(os.path.join(out_dir, 'augment.json'), index_doc)
    return index_doc
