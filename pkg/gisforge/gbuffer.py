"""G-buffer data model, validation, input pyramids and on-disk format.

A :class:`GBufferSample` holds the per-pixel conditioning channels of one
image (surface normals in camera coordinates, depth, one-hot materials, the
object mask and the background image) and optionally the target image. All
arrays are ``H x W`` or ``H x W x C`` numpy arrays.

The network never sees depth directly: :func:`encode_depth` turns it into a
disparity ``z_near / z`` in ``[0, 1]``. :func:`build_pyramid` concatenates the
channels in the order given by :func:`channel_layout` and average-pools them
down to the coarsest cascade level.

On disk a sample is a directory::

    sample.json      shapes, dtype, palette digest, z_near, seed
    normals.f32      little-endian float32, H x W x 3
    depth.f32        little-endian float32, H x W
    materials.png    8-bit label map, 255 on background
    mask.png         8-bit, 0 or 255
    background.png   8-bit RGB
    target.png       8-bit RGB (optional)

and a dataset is a directory of samples plus ``manifest.json``.

"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import copy
import dataclasses
import hashlib
import json
import os
import warnings

from PIL import Image
import numpy as np

from .util import read_json, write_json

#: Allowed deviation of foreground normals from unit length.
UNIT_TOLERANCE = 1e-4

#: Label written to ``materials.png`` on background pixels.
BACKGROUND_LABEL = 255

SAMPLE_FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'

#: Modality names in channel order.
MODALITIES = ('normals', 'depth', 'materials', 'mask', 'background')
EXCLUDABLE = ('normals', 'depth', 'materials')

DEFAULT_MATERIALS = (
    'matte-red',
    'matte-blue',
    'matte-green',
    'glossy-metal',
    'chrome-like',
    'glass',
)


class GBufferError(Exception):
    """Base class of G-buffer errors."""


class StructureError(GBufferError):
    """Arrays are missing or their shapes disagree."""


class ValidationError(GBufferError):
    """A sample violates a G-buffer invariant."""


class ResolutionError(GBufferError):
    """Image size is incompatible with a pooling schedule."""


class DatasetError(GBufferError):
    """Reading or writing a dataset sample failed.

    :param int index: Index of the failing sample within its dataset.

    """

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f'sample {index}: {message}')
        self.index = index


class DepthClampWarning(UserWarning):
    """Foreground depth nearer than ``z_near`` was clamped to disparity 1."""


@dataclass(frozen=True)
class MaterialPalette:
    """Ordered material alphabet; material id ``i`` is ``names[i]``.

    The palette carries names only. The physical appearance of a material is
    hidden inside the scene oracle.

    """

    names: Tuple[str, ...] = DEFAULT_MATERIALS

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError('palette must contain at least one material')
        if len(set(self.names)) != len(self.names):
            raise ValueError(f'duplicate material names in {self.names}')
        if len(self.names) >= BACKGROUND_LABEL:
            raise ValueError(f'palette too large: {len(self.names)} materials')

    @classmethod
    def named(cls, name: str) -> 'MaterialPalette':
        """Look up a palette by its configuration name."""
        if name == 'default':
            return cls()
        raise ValueError(f'unknown palette: {name}')

    @property
    def entries(self) -> List[Tuple[int, str]]:
        return list(enumerate(self.names))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def digest(self) -> str:
        blob = json.dumps(list(self.names)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GBufferSample:
    normals: np.ndarray
    depth: np.ndarray
    materials: np.ndarray
    mask: np.ndarray
    background: np.ndarray
    target: Optional[np.ndarray] = None
    z_near: float = 1.0

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def num_materials(self) -> int:
        return self.materials.shape[-1]

    @property
    def foreground(self) -> np.ndarray:
        return self.mask > 0.5

    def replace(self, **changes) -> 'GBufferSample':
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    kind: str
    pixel: Optional[Tuple[int, int]]
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass
class ValidationReport:
    """Violated invariants of one sample; empty when the sample is valid."""

    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)

    @property
    def messages(self) -> List[str]:
        return [v.message for v in self.violations]

    def _check(self, kind: str, bad: np.ndarray, what: str) -> None:
        if bad.any():
            r, c = (int(i) for i in np.argwhere(bad)[0][:2])
            self.violations.append(Violation(kind, (r, c), f'{what} at ({r},{c})'))


def check_structure(sample: GBufferSample, palette: MaterialPalette) -> None:
    """Raise :class:`StructureError` unless all shapes agree."""
    mask = np.asarray(sample.mask)
    if mask.ndim != 2:
        raise StructureError(f'mask must be HxW, got shape {mask.shape}')
    h, w = mask.shape
    expected = {
        'normals': (h, w, 3),
        'depth': (h, w),
        'materials': (h, w, len(palette)),
        'background': (h, w, 3),
    }
    if sample.target is not None:
        expected['target'] = (h, w, 3)
    for name, shape in expected.items():
        actual = np.shape(getattr(sample, name))
        if actual != shape:
            raise StructureError(f'{name} has shape {actual}, expected {shape}')


def validate_sample(
    sample: GBufferSample, palette: MaterialPalette, levels: Optional[int] = None
) -> ValidationReport:
    """Check every G-buffer invariant of `sample`.

    Each violated invariant is reported once, with the coordinates of its
    first offending pixel in row-major order.

    :param int levels:
        When given, the resolution must also be divisible by
        ``2 ** (levels - 1)``.
    :raises StructureError: On shape mismatches between channels.

    """
    check_structure(sample, palette)
    report = ValidationReport()
    mask = np.asarray(sample.mask)
    fg = mask == 1
    bg = mask == 0
    report._check('mask', ~(fg | bg), 'non-binary mask')

    norm = np.linalg.norm(sample.normals, axis=-1)
    report._check(
        'normals', fg & (np.abs(norm - 1) > UNIT_TOLERANCE), 'non-unit normal'
    )
    report._check(
        'normals', bg & np.any(sample.normals != 0, axis=-1), 'background normal'
    )

    materials = np.asarray(sample.materials)
    binary = np.all((materials == 0) | (materials == 1), axis=-1)
    one_hot = binary & (materials.sum(axis=-1) == 1)
    report._check('materials', fg & ~one_hot, 'not one-hot')
    report._check(
        'materials', bg & np.any(materials != 0, axis=-1), 'background material'
    )

    depth = np.asarray(sample.depth)
    report._check('depth', ~np.isfinite(depth), 'non-finite depth')
    report._check('depth', (depth > 0) != fg, 'depth/mask mismatch')

    for name in ('background', 'target'):
        image = getattr(sample, name)
        if image is not None:
            image = np.asarray(image)
            out = ~((image >= 0) & (image <= 1))
            report._check(name, np.any(out, axis=-1), f'{name} out of range')

    if levels is not None:
        divisor = 2 ** (levels - 1)
        if sample.height % divisor or sample.width % divisor:
            report.violations.append(
                Violation(
                    'resolution',
                    None,
                    f'resolution {sample.height}x{sample.width} not divisible '
                    f'by {divisor}',
                )
            )
    return report


def encode_depth(depth: np.ndarray, mask: np.ndarray, z_near: float) -> np.ndarray:
    """Encode depth as disparity ``z_near / z`` on the foreground, 0 elsewhere.

    Foreground depth nearer than `z_near` is clamped to disparity 1 with a
    :class:`DepthClampWarning`.

    :raises ValidationError: For non-positive foreground depth.

    """
    if z_near <= 0:
        raise ValueError(f'z_near must be positive, got {z_near}')
    depth = np.asarray(depth)
    fg = np.asarray(mask) > 0.5
    bad = fg & ~(depth > 0)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(f'non-positive foreground depth at ({r},{c})')
    disparity = np.zeros(depth.shape, dtype=np.result_type(depth.dtype, np.float32))
    disparity[fg] = z_near / depth[fg]
    if np.any(disparity > 1):
        warnings.warn(
            f'{int(np.sum(disparity > 1))} foreground pixels nearer than '
            f'z_near={z_near} clamped',
            DepthClampWarning,
            stacklevel=2,
        )
        np.minimum(disparity, 1, out=disparity)
    return disparity


def channel_layout(
    num_materials: int, exclude: Sequence[str] = ()
) -> Dict[str, slice]:
    """Map each included modality to its channel slice in the input stack.

    Full order: normals (3), disparity (1), materials (Nm), mask (1),
    background (3). Excluded modalities are dropped from the stack.

    """
    for modality in exclude:
        if modality not in EXCLUDABLE:
            raise ValueError(f'modality cannot be excluded: {modality}')
    widths = {
        'normals': 3,
        'depth': 1,
        'materials': num_materials,
        'mask': 1,
        'background': 3,
    }
    layout = {}
    start = 0
    for modality in MODALITIES:
        if modality in exclude:
            continue
        layout[modality] = slice(start, start + widths[modality])
        start += widths[modality]
    return layout


def num_channels(num_materials: int, exclude: Sequence[str] = ()) -> int:
    """Input channel count ``C_in`` for the given palette size."""
    layout = channel_layout(num_materials, exclude)
    return max(s.stop for s in layout.values())


def stack_channels(sample: GBufferSample, exclude: Sequence[str] = ()) -> np.ndarray:
    """Concatenate the included modalities at full resolution (H x W x C_in)."""
    parts = {
        'normals': sample.normals,
        'depth': encode_depth(sample.depth, sample.mask, sample.z_near)[..., None],
        'materials': sample.materials,
        'mask': np.asarray(sample.mask)[..., None],
        'background': sample.background,
    }
    layout = channel_layout(sample.num_materials, exclude)
    return np.concatenate(
        [np.asarray(parts[m], dtype=np.float32) for m in layout], axis=-1
    )


@dataclass
class InputPyramid:
    """Per-level conditioning input, coarsest level first.

    Level ``i`` has shape ``h_i x w_i x C_in`` with the resolution doubling
    from level to level; the last level is the full-resolution stack.

    """

    levels: List[np.ndarray]
    layout: Dict[str, slice]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.levels[i]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [level.shape for level in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]


def _check_divisible(height: int, width: int, factor: int, what: str) -> None:
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f'factor must be a power of two, got {factor}')
    if height % factor or width % factor:
        raise ResolutionError(
            f'resolution {height}x{width} must be divisible by {factor} {what}'
        )


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    return x.reshape(h // 2, 2, w // 2, 2, *x.shape[2:]).mean(axis=(1, 3))


def renormalize(normals: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale normals to unit length where their magnitude exceeds `eps`.

    Normals with magnitude ``<= eps`` become the zero vector.

    """
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    keep = norm > eps
    return np.where(keep, normals / np.where(keep, norm, 1), 0).astype(normals.dtype)


def build_pyramid(
    sample: GBufferSample, levels: int, exclude: Sequence[str] = ()
) -> InputPyramid:
    """Build the input pyramid of `sample` for a cascade of `levels` modules.

    :raises ResolutionError:
        When the resolution is not divisible by ``2 ** (levels - 1)``.

    """
    if levels < 1:
        raise ValueError(f'levels must be >= 1, got {levels}')
    _check_divisible(
        sample.height, sample.width, 2 ** (levels - 1), f'for {levels} levels'
    )
    layout = channel_layout(sample.num_materials, exclude)
    stack = stack_channels(sample, exclude)
    pyramid = [stack]
    normals = layout.get('normals')
    for _ in range(levels - 1):
        coarse = _pool2(pyramid[0])
        if normals is not None:
            coarse[..., normals] = renormalize(coarse[..., normals])
        pyramid.insert(0, coarse)
    return InputPyramid(pyramid, layout)


def downscale_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool `mask` by `factor` into soft occupancy values in [0, 1]."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    _check_divisible(h, w, factor, 'for mask downscaling')
    return mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def material_labels(materials: np.ndarray) -> np.ndarray:
    """Label map of one-hot materials; :data:`BACKGROUND_LABEL` where all-zero."""
    labels = np.argmax(materials, axis=-1).astype(np.uint8)
    labels[~np.any(materials > 0, axis=-1)] = BACKGROUND_LABEL
    return labels


def one_hot_materials(labels: np.ndarray, num_materials: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels >= num_materials) & (labels != BACKGROUND_LABEL)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise StructureError(
            f'material label {labels[r, c]} at ({r},{c}) not in palette'
        )
    eye = np.vstack([np.eye(num_materials, dtype=np.float32), np.zeros(num_materials)])
    return eye[np.where(labels == BACKGROUND_LABEL, num_materials, labels)].astype(
        np.float32
    )


def relabel_materials(
    sample: GBufferSample, mapping: Dict[int, int]
) -> GBufferSample:
    """Swap material ids on the foreground, e.g. paint for chrome.

    Ids absent from `mapping` are kept. All other channels are unchanged.

    """
    nm = sample.num_materials
    for src, dst in mapping.items():
        if not (0 <= src < nm and 0 <= dst < nm):
            raise ValueError(f'material mapping {src}->{dst} outside 0..{nm - 1}')
    labels = material_labels(sample.materials)
    relabeled = labels.copy()
    for src, dst in mapping.items():
        relabeled[labels == src] = dst
    return sample.replace(materials=one_hot_materials(relabeled, nm), target=None)


def _shift(array: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(array)
    h, w = array.shape[:2]
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[dst_r, dst_c] = array[src_r, src_c]
    return out


def paste_object(
    sample: GBufferSample, background: np.ndarray, offset: Tuple[int, int]
) -> GBufferSample:
    """Move the object of `sample` by ``(rows, cols)`` over a new background.

    Object pixels shifted outside the frame are dropped. The result is a
    conditioning sample without target.

    """
    background = np.asarray(background, dtype=np.float32)
    if background.shape != (sample.height, sample.width, 3):
        raise StructureError(
            f'background has shape {background.shape}, expected '
            f'{(sample.height, sample.width, 3)}'
        )
    dr, dc = offset
    return GBufferSample(
        normals=_shift(sample.normals, dr, dc),
        depth=_shift(sample.depth, dr, dc),
        materials=_shift(sample.materials, dr, dc),
        mask=_shift(sample.mask, dr, dc),
        background=background,
        target=None,
        z_near=sample.z_near,
    )


def quantize(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] image to 8 bits with ``round(x * 255)``."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def _write_png(path: str, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format='PNG')


def _read_png(path: str) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image)


def write_sample(
    sample: GBufferSample,
    directory: str,
    palette: MaterialPalette,
    meta: Optional[dict] = None,
) -> None:
    """Write `sample` to `directory` in the on-disk sample format."""
    check_structure(sample, palette)
    os.makedirs(directory, exist_ok=True)
    h, w = sample.height, sample.width
    np.asarray(sample.normals, dtype='<f4').tofile(
        os.path.join(directory, 'normals.f32')
    )
    np.asarray(sample.depth, dtype='<f4').tofile(os.path.join(directory, 'depth.f32'))
    _write_png(
        os.path.join(directory, 'materials.png'), material_labels(sample.materials)
    )
    _write_png(os.path.join(directory, 'mask.png'), quantize(sample.mask))
    _write_png(os.path.join(directory, 'background.png'), quantize(sample.background))
    if sample.target is not None:
        _write_png(os.path.join(directory, 'target.png'), quantize(sample.target))
    info = {
        'version': SAMPLE_FORMAT_VERSION,
        'dtype': '<f4',
        'shapes': {'normals': [h, w, 3], 'depth': [h, w]},
        'num_materials': len(palette),
        'palette': palette.digest(),
        'z_near': float(sample.z_near),
        'has_target': sample.target is not None,
    }
    info.update(meta or {})
    write_json(os.path.join(directory, 'sample.json'), info)


def read_sample(
    directory: str, palette: Optional[MaterialPalette] = None
) -> GBufferSample:
    """Read a sample written by :func:`write_sample`.

    :raises StructureError:
        On a palette mismatch, or when files disagree with ``sample.json``.

    """
    info = read_json(os.path.join(directory, 'sample.json'))
    if info.get('version') != SAMPLE_FORMAT_VERSION:
        raise StructureError(f'unsupported sample version {info.get("version")}')
    if palette is not None and info['palette'] != palette.digest():
        raise StructureError(f'{directory}: sample written with a different palette')
    shapes = info['shapes']

    def raw(name: str) -> np.ndarray:
        data = np.fromfile(os.path.join(directory, f'{name}.f32'), dtype=info['dtype'])
        if data.size != np.prod(shapes[name]):
            raise StructureError(f'{directory}: {name}.f32 has {data.size} values')
        return data.reshape(shapes[name]).astype(np.float32)

    labels = _read_png(os.path.join(directory, 'materials.png'))
    target = None
    if info['has_target']:
        target = _read_png(os.path.join(directory, 'target.png')) / np.float32(255)
    return GBufferSample(
        normals=raw('normals'),
        depth=raw('depth'),
        materials=one_hot_materials(labels, info['num_materials']),
        mask=(_read_png(os.path.join(directory, 'mask.png')) > 127).astype(np.float32),
        background=_read_png(os.path.join(directory, 'background.png'))
        / np.float32(255),
        target=target,
        z_near=info['z_near'],
    )


def sample_name(index: int) -> str:
    return f'{index:06d}'


def write_manifest(root: str, manifest: dict) -> None:
    write_json(os.path.join(root, MANIFEST_NAME), manifest)


class SampleDataset:
    """Lazily loaded dataset of samples indexed by its manifest.

    :param str root: Dataset directory containing ``manifest.json``.
    :param int limit: Use only the first `limit` samples when positive.
    :param bool cache: Keep loaded samples in memory.

    """

    def __init__(self, root: str, limit: int = 0, cache: bool = False) -> None:
        path = os.path.join(root, MANIFEST_NAME)
        if not os.path.isfile(path):
            raise DatasetError(-1, f'no {MANIFEST_NAME} in {root}')
        self.root = root
        self.manifest = read_json(path)
        self.palette = MaterialPalette(tuple(self.manifest['palette']))
        self.size: Tuple[int, int] = tuple(self.manifest['size'])  # type: ignore
        self.seed = self.manifest.get('seed')
        self.entries: List[dict] = self.manifest['samples']
        if limit > 0:
            self.entries = self.entries[:limit]
        self._cache: Optional[Dict[int, GBufferSample]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.entries)

    def sample_dir(self, index: int) -> str:
        return os.path.join(self.root, self.entries[index]['name'])

    def __getitem__(self, index: int) -> GBufferSample:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        try:
            sample = read_sample(self.sample_dir(index), self.palette)
        except (OSError, ValueError, KeyError, GBufferError) as e:
            raise DatasetError(index, str(e)) from e
        if self._cache is not None:
            self._cache[index] = sample
        return sample

    def __iter__(self) -> Iterator[GBufferSample]:
        for i in range(len(self)):
            yield self[i]

    def head(self, limit: int) -> 'SampleDataset':
        """The first `limit` samples, or the whole dataset when `limit` <= 0."""
        if limit <= 0 or limit >= len(self.entries):
            return self
        view = copy.copy(self)
        view.entries = self.entries[:limit]
        return view


def open_dataset(root: str, limit: int = 0, cache: bool = False) -> SampleDataset:
    return SampleDataset(root, limit, cache)


def validate_dataset(
    root: str,
    levels: Optional[int] = None,
    limit: int = 0,
    require_target: bool = True,
) -> Dict[str, ValidationReport]:
    """Validate every sample of a dataset.

    :returns: Reports of the failing samples keyed by sample name; empty when
        the whole dataset is valid. Unreadable samples yield a report with a
        single ``'structure'`` violation.

    """
    dataset = open_dataset(root, limit)
    failures = {}
    for index, entry in enumerate(dataset.entries):
        try:
            sample = dataset[index]
            report = validate_sample(sample, dataset.palette, levels)
            if require_target and sample.target is None:
                report.violations.append(Violation('target', None, 'missing target'))
        except (DatasetError, StructureError) as e:
            report = ValidationReport([Violation('structure', None, str(e))])
        if not report.ok:
            failures[entry['name']] = report
    return failures
