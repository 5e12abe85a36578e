"""Procedural scene oracle.

The oracle samples hidden scenes (primitives, material physics, light,
camera and backdrop), rasterizes their G-buffers by analytic ray casting and
shades ground-truth targets with ambient + Lambert + Phong lighting, hard
ground shadows and glass transparency.

Geometry is expressed in the camera frame: the camera sits at the origin and
looks along -z with +y up, and the ground plane is ``y = -camera.height``.
Pixel ``(r, c)`` looks through the image-plane offset
``((c - W/2) / f, -(r - H/2) / f, -1)``, so pixel ``(H/2, W/2)`` lies on the
optical axis.

"""
from dataclasses import asdict, dataclass, replace
from multiprocessing import Process, Queue, cpu_count
from typing import Any, Dict, List, Optional, Sequence, Tuple
import math
import os

import numpy as np

from .config import ConfigDict, ConfigError
from .gbuffer import (
    DatasetError,
    GBufferSample,
    MaterialPalette,
    one_hot_materials,
    quantize,
    sample_name,
    write_manifest,
    write_sample,
)
from .util import WorkerError, gather, read_json, write_json

Vec3 = Tuple[float, float, float]

MANIFEST_VERSION = 1

#: Ray offset used to leave a surface before casting a shadow ray.
SHADOW_EPS = 1e-4


@dataclass(frozen=True)
class MaterialPhysics:
    albedo: Vec3
    specular_strength: float
    specular_exponent: float
    alpha: float = 1.0


DEFAULT_PHYSICS: Dict[str, MaterialPhysics] = {
    'matte-red': MaterialPhysics((0.80, 0.16, 0.12), 0.04, 8.0),
    'matte-blue': MaterialPhysics((0.14, 0.24, 0.78), 0.04, 8.0),
    'matte-green': MaterialPhysics((0.16, 0.66, 0.22), 0.04, 8.0),
    'glossy-metal': MaterialPhysics((0.58, 0.58, 0.62), 0.45, 32.0),
    'chrome-like': MaterialPhysics((0.86, 0.86, 0.90), 0.90, 96.0),
    'glass': MaterialPhysics((0.72, 0.84, 0.90), 0.60, 64.0, alpha=0.4),
}


@dataclass(frozen=True)
class Primitive:
    """A sphere (``size = (radius,)``) or an axis-aligned box (half extents)."""

    shape: str
    center: Vec3
    size: Tuple[float, ...]
    material_id: int


@dataclass(frozen=True)
class Light:
    """Directional light; `direction` points from the scene toward the light."""

    direction: Vec3
    intensity: float
    ambient: float


@dataclass(frozen=True)
class Camera:
    height: float
    z_near: float
    size: Tuple[int, int]
    focal: float


@dataclass(frozen=True)
class Backdrop:
    sky_top: Vec3
    sky_bottom: Vec3
    ground: Vec3
    noise_amplitude: float
    noise_cells: int
    noise_seed: int
    shadow_factor: float


@dataclass(frozen=True)
class SceneSpec:
    primitives: Tuple[Primitive, ...]
    light: Light
    camera: Camera
    backdrop: Backdrop
    physics: Tuple[MaterialPhysics, ...]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'SceneSpec':
        light, camera, backdrop = d['light'], d['camera'], d['backdrop']
        return cls(
            primitives=tuple(
                Primitive(
                    p['shape'], tuple(p['center']), tuple(p['size']), p['material_id']
                )
                for p in d['primitives']
            ),
            light=Light(
                tuple(light['direction']), light['intensity'], light['ambient']
            ),
            camera=Camera(
                camera['height'],
                camera['z_near'],
                tuple(camera['size']),
                camera['focal'],
            ),
            backdrop=Backdrop(
                sky_top=tuple(backdrop['sky_top']),
                sky_bottom=tuple(backdrop['sky_bottom']),
                ground=tuple(backdrop['ground']),
                noise_amplitude=backdrop['noise_amplitude'],
                noise_cells=backdrop['noise_cells'],
                noise_seed=backdrop['noise_seed'],
                shadow_factor=backdrop['shadow_factor'],
            ),
            physics=tuple(
                MaterialPhysics(
                    tuple(m['albedo']),
                    m['specular_strength'],
                    m['specular_exponent'],
                    m['alpha'],
                )
                for m in d['physics']
            ),
        )


Range = Tuple[float, float]


@dataclass(frozen=True)
class SceneRanges:
    """Sampling ranges of the scene oracle; see the ``forge.*`` config keys."""

    size: Tuple[int, int] = (64, 64)
    primitives: Tuple[int, int] = (1, 3)
    shapes: Tuple[str, ...] = ('sphere', 'box')
    radius: Range = (0.5, 1.0)
    box_size: Range = (0.4, 0.8)
    x: Range = (-1.5, 1.5)
    z: Range = (-7.0, -4.5)
    camera_height: Range = (1.0, 1.6)
    focal: float = 1.2
    z_near: float = 1.0
    elevation: Range = (20.0, 70.0)
    intensity: Range = (0.7, 1.1)
    ambient: Range = (0.1, 0.3)
    shadow_factor: float = 0.55
    noise_amplitude: float = 0.06
    noise_cells: int = 8
    albedo_jitter: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            'primitives',
            'radius',
            'box_size',
            'x',
            'z',
            'camera_height',
            'elevation',
            'intensity',
            'ambient',
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f'degenerate forge.{name} range: {lo} > {hi}')
        if self.primitives[0] < 0:
            raise ConfigError('forge.primitives must be non-negative')
        if not self.shapes or any(s not in ('sphere', 'box') for s in self.shapes):
            raise ConfigError(f'invalid forge.shapes: {self.shapes}')
        if min(self.radius[0], self.box_size[0], self.camera_height[0]) <= 0:
            raise ConfigError('sizes and camera height must be positive')
        if self.z_near <= 0 or self.focal <= 0:
            raise ConfigError('forge.z_near and forge.focal must be positive')
        if not (0 <= self.elevation[0] and self.elevation[1] <= 90):
            raise ConfigError('forge.light.elevation must lie within [0, 90]')
        if not (0 <= self.ambient[0] and self.ambient[1] <= 1):
            raise ConfigError('forge.light.ambient must lie within [0, 1]')
        if not 0 <= self.shadow_factor <= 1:
            raise ConfigError('forge.shadow_factor must lie within [0, 1]')

    @classmethod
    def from_config(cls, config: ConfigDict) -> 'SceneRanges':
        return cls(
            size=tuple(config['forge.size']),  # type: ignore
            primitives=tuple(config['forge.primitives']),  # type: ignore
            shapes=tuple(config['forge.shapes']),
            radius=tuple(config['forge.radius']),  # type: ignore
            box_size=tuple(config['forge.box_size']),  # type: ignore
            x=tuple(config['forge.x']),  # type: ignore
            z=tuple(config['forge.z']),  # type: ignore
            camera_height=tuple(config['forge.camera_height']),  # type: ignore
            focal=config['forge.focal'],
            z_near=config['forge.z_near'],
            elevation=tuple(config['forge.light.elevation']),  # type: ignore
            intensity=tuple(config['forge.light.intensity']),  # type: ignore
            ambient=tuple(config['forge.light.ambient']),  # type: ignore
            shadow_factor=config['forge.shadow_factor'],
            noise_amplitude=config['forge.noise.amplitude'],
            noise_cells=config['forge.noise.cells'],
            albedo_jitter=config['forge.albedo_jitter'],
        )


def _uniform(rng: np.random.Generator, bounds: Range) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _sample_light(rng: np.random.Generator, ranges: SceneRanges) -> Light:
    elevation = math.radians(_uniform(rng, ranges.elevation))
    azimuth = float(rng.uniform(0.0, 2 * math.pi))
    direction = (
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
        math.cos(elevation) * math.cos(azimuth),
    )
    norm = math.sqrt(sum(v * v for v in direction))
    return Light(
        direction=tuple(v / norm for v in direction),  # type: ignore
        intensity=_uniform(rng, ranges.intensity),
        ambient=_uniform(rng, ranges.ambient),
    )


def _physics(
    rng: np.random.Generator, palette: MaterialPalette, jitter: float
) -> Tuple[MaterialPhysics, ...]:
    physics = []
    for name in palette.names:
        base = DEFAULT_PHYSICS.get(name, MaterialPhysics((0.6, 0.6, 0.6), 0.1, 16.0))
        if jitter > 0:
            offset = rng.uniform(-jitter, jitter, 3)
            albedo = np.clip(np.array(base.albedo) + offset, 0, 1)
            base = replace(base, albedo=tuple(float(a) for a in albedo))
        physics.append(base)
    return tuple(physics)


def sample_scene(
    seed: int, ranges: SceneRanges, palette: Optional[MaterialPalette] = None
) -> SceneSpec:
    """Sample a scene deterministically from `seed`.

    Primitives rest on the ground plane; their footprints are drawn so that
    they do not overlap when possible.

    """
    palette = palette or MaterialPalette()
    rng = np.random.default_rng(seed)
    camera_height = _uniform(rng, ranges.camera_height)
    height, width = ranges.size
    camera = Camera(
        height=camera_height,
        z_near=ranges.z_near,
        size=(height, width),
        focal=ranges.focal * width,
    )
    count = int(rng.integers(ranges.primitives[0], ranges.primitives[1] + 1))
    primitives: List[Primitive] = []
    footprints: List[Tuple[float, float, float]] = []
    for _ in range(count):
        shape = ranges.shapes[int(rng.integers(len(ranges.shapes)))]
        material_id = int(rng.integers(len(palette)))
        if shape == 'sphere':
            size: Tuple[float, ...] = (_uniform(rng, ranges.radius),)
            lift, r = size[0], size[0]
        else:
            size = tuple(_uniform(rng, ranges.box_size) for _ in range(3))
            lift, r = size[1], math.hypot(size[0], size[2])
        for _attempt in range(20):
            x = _uniform(rng, ranges.x)
            z = _uniform(rng, ranges.z)
            clear = (math.hypot(x - fx, z - fz) > r + fr for fx, fz, fr in footprints)
            if all(clear):
                break
        footprints.append((x, z, r))
        center = (x, lift - camera_height, z)
        primitives.append(Primitive(shape, center, size, material_id))

    light = _sample_light(rng, ranges)
    backdrop = Backdrop(
        sky_top=tuple(float(v) for v in rng.uniform(0.45, 0.85, 3)),  # type: ignore
        sky_bottom=tuple(float(v) for v in rng.uniform(0.6, 0.95, 3)),  # type: ignore
        ground=tuple(float(v) for v in rng.uniform(0.25, 0.55, 3)),  # type: ignore
        noise_amplitude=ranges.noise_amplitude,
        noise_cells=ranges.noise_cells,
        noise_seed=int(rng.integers(2 ** 31)),
        shadow_factor=ranges.shadow_factor,
    )
    return SceneSpec(
        primitives=tuple(primitives),
        light=light,
        camera=camera,
        backdrop=backdrop,
        physics=_physics(rng, palette, ranges.albedo_jitter),
    )


def resample_light(
    scene: SceneSpec, seed: int, ranges: Optional[SceneRanges] = None
) -> SceneSpec:
    """Return `scene` with a freshly sampled light and unchanged geometry."""
    rng = np.random.default_rng(seed)
    return replace(scene, light=_sample_light(rng, ranges or SceneRanges()))


def ray_directions(camera: Camera) -> np.ndarray:
    """Unit view-ray direction of every pixel, ``H x W x 3``."""
    height, width = camera.size
    rows = (np.arange(height, dtype=np.float64) - height / 2) / camera.focal
    cols = (np.arange(width, dtype=np.float64) - width / 2) / camera.focal
    d = np.empty((height, width, 3))
    d[..., 0] = cols[None, :]
    d[..., 1] = -rows[:, None]
    d[..., 2] = -1.0
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def intersect(
    prim: Primitive, origins: np.ndarray, dirs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Intersect rays with a primitive.

    :returns: ``(t, normals)``; ``t`` is ``inf`` where the ray misses or the
        hit lies behind the origin.

    """
    center = np.asarray(prim.center)
    oc = origins - center
    if prim.shape == 'sphere':
        radius = prim.size[0]
        b = np.sum(dirs * oc, axis=-1)
        disc = b * b - (np.sum(oc * oc, axis=-1) - radius * radius)
        root = np.sqrt(np.maximum(disc, 0))
        t = -b - root
        t = np.where(t > 0, t, -b + root)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        hit = origins + np.where(np.isfinite(t), t, 0)[..., None] * dirs
        normals = (hit - center) / radius
        return t, normals
    if prim.shape == 'box':
        half = np.asarray(prim.size)
        safe = np.where(dirs == 0, 1e-30, dirs)
        t1 = (-half - oc) / safe
        t2 = (half - oc) / safe
        enter = np.minimum(t1, t2)
        leave = np.maximum(t1, t2)
        t_enter = enter.max(axis=-1)
        t_leave = leave.min(axis=-1)
        t = np.where((t_leave >= t_enter) & (t_enter > 0), t_enter, np.inf)
        axis = np.argmax(enter, axis=-1)
        normals = np.zeros_like(dirs)
        sign = -np.sign(np.take_along_axis(safe, axis[..., None], axis=-1))[..., 0]
        np.put_along_axis(normals, axis[..., None], sign[..., None], axis=-1)
        return t, normals
    raise ValueError(f'unknown primitive shape: {prim.shape}')


def _value_noise(
    height: int, width: int, cells: int, seed: int
) -> np.ndarray:
    lattice = np.random.default_rng(seed).random((cells + 1, cells + 1))
    u = np.arange(height) * cells / height
    v = np.arange(width) * cells / width
    i0, j0 = u.astype(int), v.astype(int)
    fu, fv = (u - i0)[:, None], (v - j0)[None, :]
    fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
    a = lattice[i0][:, j0]
    b = lattice[i0][:, j0 + 1]
    c = lattice[i0 + 1][:, j0]
    d = lattice[i0 + 1][:, j0 + 1]
    return (a * (1 - fv) + b * fv) * (1 - fu) + (c * (1 - fv) + d * fv) * fu


def render_backdrop(scene: SceneSpec) -> np.ndarray:
    """Backdrop without objects or shadows, quantized to 8-bit levels."""
    height, width = scene.camera.size
    bd = scene.backdrop
    dirs = ray_directions(scene.camera)
    rows = np.linspace(0.0, 1.0, height)[:, None, None]
    sky = np.asarray(bd.sky_top) * (1 - rows) + np.asarray(bd.sky_bottom) * rows
    image = np.broadcast_to(sky, (height, width, 3)).copy()
    ground = dirs[..., 1] < 0
    # Ground darkens slightly toward the horizon.
    fade = np.clip(-dirs[..., 1] * 4, 0, 1)[..., None]
    ground_color = np.asarray(bd.ground) * (0.75 + 0.25 * fade)
    image = np.where(ground[..., None], ground_color, image)
    if bd.noise_amplitude > 0:
        noise = _value_noise(height, width, bd.noise_cells, bd.noise_seed)
        image = image + (noise[..., None] - 0.5) * 2 * bd.noise_amplitude
    # Quantized so the stored background is exactly the one used for shading.
    return (quantize(image) / np.float32(255)).astype(np.float32)


def _nearest_hit(
    scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_best = np.full(dirs.shape[:-1], np.inf)
    normals = np.zeros(dirs.shape)
    prim_index = np.full(dirs.shape[:-1], -1)
    for i, prim in enumerate(scene.primitives):
        t, n = intersect(prim, origins, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        normals = np.where(closer[..., None], n, normals)
        prim_index = np.where(closer, i, prim_index)
    return t_best, normals, prim_index


def rasterize_gbuffer(scene: SceneSpec) -> GBufferSample:
    """Ray-cast the analytic G-buffer of `scene` (target absent)."""
    height, width = scene.camera.size
    dirs = ray_directions(scene.camera)
    t, normals, prim_index = _nearest_hit(scene, np.zeros(3), dirs)
    fg = np.isfinite(t)
    normals = np.where(fg[..., None], normals, 0)
    material_of = np.array(
        [p.material_id for p in scene.primitives] + [0], dtype=np.int64
    )
    labels = np.where(fg, material_of[prim_index], 255).astype(np.uint8)
    return GBufferSample(
        normals=normals.astype(np.float32),
        depth=np.where(fg, t, 0).astype(np.float32),
        materials=one_hot_materials(labels, len(scene.physics)),
        mask=fg.astype(np.float32),
        background=render_backdrop(scene),
        target=None,
        z_near=scene.camera.z_near,
    )


def shadow_mask(scene: SceneSpec) -> np.ndarray:
    """Ground pixels whose ray toward the light hits a primitive."""
    dirs = ray_directions(scene.camera)
    down = dirs[..., 1] < 0
    dy = np.where(down, dirs[..., 1], -1)
    t_ground = np.where(down, -scene.camera.height / dy, 0)
    points = t_ground[..., None] * dirs
    light = np.broadcast_to(np.asarray(scene.light.direction), dirs.shape)
    origins = points + SHADOW_EPS * light
    t, _, _ = _nearest_hit(scene, origins, light)
    return down & np.isfinite(t)


def shade_target(scene: SceneSpec, gbuffer: GBufferSample) -> np.ndarray:
    """Shade the composited target image of `scene` from its G-buffer.

    Foreground: ``ambient*albedo + intensity*max(0, n.l)*albedo + specular``,
    clamped to [0, 1]; glass is alpha-composited over the background. Ground
    pixels in shadow are the backdrop times the shadow factor.

    """
    light = scene.light
    fg = np.asarray(gbuffer.mask) > 0.5
    background = np.asarray(gbuffer.background, dtype=np.float64)
    n = np.asarray(gbuffer.normals, dtype=np.float64)
    l_dir = np.asarray(light.direction)
    view = -ray_directions(scene.camera)

    labels = np.argmax(gbuffer.materials, axis=-1)
    albedo = np.array([m.albedo for m in scene.physics])[labels]
    strength = np.array([m.specular_strength for m in scene.physics])[labels]
    exponent = np.array([m.specular_exponent for m in scene.physics])[labels]
    alpha = np.array([m.alpha for m in scene.physics])[labels]

    n_dot_l = np.sum(n * l_dir, axis=-1)
    diffuse = np.maximum(n_dot_l, 0)
    reflected = 2 * n_dot_l[..., None] * n - l_dir
    r_dot_v = np.maximum(np.sum(reflected * view, axis=-1), 0)
    specular = np.where(
        n_dot_l > 0, light.intensity * strength * r_dot_v ** exponent, 0
    )
    shaded = (
        light.ambient * albedo
        + light.intensity * diffuse[..., None] * albedo
        + specular[..., None]
    )
    shaded = np.clip(shaded, 0, 1)
    shaded = alpha[..., None] * shaded + (1 - alpha[..., None]) * background

    factor = np.where(shadow_mask(scene), scene.backdrop.shadow_factor, 1.0)
    ground = background * factor[..., None]
    return np.where(fg[..., None], shaded, ground).astype(np.float32)


def derive_seed(seed: int, index: int) -> int:
    """Per-sample seed recorded in the dataset manifest."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_sample(
    sample_seed: int, ranges: SceneRanges, palette: Optional[MaterialPalette] = None
) -> Tuple[SceneSpec, GBufferSample]:
    """Sample, rasterize and shade one scene."""
    scene = sample_scene(sample_seed, ranges, palette)
    gbuffer = rasterize_gbuffer(scene)
    return scene, gbuffer.replace(target=shade_target(scene, gbuffer))


def write_generated(
    directory: str,
    sample_seed: int,
    ranges: SceneRanges,
    palette: MaterialPalette,
) -> None:
    """Generate one sample and write it with its ``scene.json``."""
    scene, sample = generate_sample(sample_seed, ranges, palette)
    write_sample(sample, directory, palette, meta={'seed': sample_seed})
    write_json(os.path.join(directory, 'scene.json'), scene.to_dict())


def read_scene(directory: str) -> SceneSpec:
    return SceneSpec.from_dict(read_json(os.path.join(directory, 'scene.json')))


def generate_dataset(
    n: int,
    seed: int,
    out_dir: str,
    ranges: Optional[SceneRanges] = None,
    palette: Optional[MaterialPalette] = None,
    workers: int = 0,
) -> Dict[str, Any]:
    """Generate `n` oracle samples under `out_dir` and write the manifest.

    Samples are produced by up to `workers` processes (0: one per CPU); the
    manifest is written by the calling process once all samples exist.

    :returns: The manifest.
    :raises DatasetError: For the lowest-indexed sample that failed.
    :raises WorkerError: When a worker process dies.

    """
    ranges = ranges or SceneRanges()
    palette = palette or MaterialPalette()
    os.makedirs(out_dir, exist_ok=True)
    tasks = [
        (index, os.path.join(out_dir, sample_name(index)), derive_seed(seed, index))
        for index in range(n)
    ]
    num_workers = min(n, workers or cpu_count())
    if num_workers <= 1:
        errors = [_generate_task(task, ranges, palette) for task in tasks]
    else:
        errors = _generate_parallel(tasks, ranges, palette, num_workers)
    failed = sorted((i, e) for i, e in errors if e is not None)
    if failed:
        raise DatasetError(*failed[0])

    manifest = {
        'version': MANIFEST_VERSION,
        'seed': seed,
        'size': list(ranges.size),
        'z_near': ranges.z_near,
        'palette': list(palette.names),
        'palette_digest': palette.digest(),
        'ranges': asdict(ranges),
        'samples': [
            {'name': sample_name(index), 'seed': sample_seed}
            for index, _, sample_seed in tasks
        ],
    }
    write_manifest(out_dir, manifest)
    return manifest


def _generate_task(
    task: Tuple[int, str, int], ranges: SceneRanges, palette: MaterialPalette
) -> Tuple[int, Optional[str]]:
    index, directory, sample_seed = task
    try:
        write_generated(directory, sample_seed, ranges, palette)
    except Exception as e:
        return index, f'{type(e).__name__}: {e}'
    return index, None


def _generate_parallel(
    tasks: Sequence[Tuple[int, str, int]],
    ranges: SceneRanges,
    palette: MaterialPalette,
    num_workers: int,
) -> List[Tuple[int, Optional[str]]]:
    task_queue: 'Queue[Optional[Tuple[int, str, int]]]' = Queue()
    result_queue: 'Queue[Tuple[int, Optional[str]]]' = Queue()
    for task in tasks:
        task_queue.put(task)
    workers = []
    for i in range(num_workers):
        worker = Process(
            name=f'forge-worker-{i}',
            target=_generate_worker,
            args=(ranges, palette, task_queue, result_queue),
        )
        worker.daemon = True
        worker.start()
        workers.append(worker)
        task_queue.put(None)  # A stop sentinel for each worker.
    try:
        results: List[Tuple[int, Optional[str]]] = gather(
            result_queue, len(tasks), workers
        )
    except WorkerError:
        for worker in workers:
            worker.terminate()
        raise
    for worker in workers:
        worker.join(5)
    return results


def _generate_worker(
    ranges: SceneRanges,
    palette: MaterialPalette,
    task_queue: 'Queue[Optional[Tuple[int, str, int]]]',
    result_queue: 'Queue[Tuple[int, Optional[str]]]',
) -> None:
    while True:
        task = task_queue.get()
        if task is None:
            break
        result_queue.put(_generate_task(task, ranges, palette))


def backdrop_only(seed: int, ranges: SceneRanges) -> np.ndarray:
    """A fresh backdrop image for compositing objects into new scenes."""
    scene = sample_scene(seed, replace(ranges, primitives=(0, 0)))
    return render_backdrop(scene)
