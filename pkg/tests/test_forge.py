import json
import os

import numpy as np
import pytest

from gisforge.config import ConfigError, default_config
from gisforge.forge import (
    Backdrop,
    Camera,
    Light,
    MaterialPhysics,
    Primitive,
    SceneRanges,
    SceneSpec,
    backdrop_only,
    derive_seed,
    generate_dataset,
    generate_sample,
    intersect,
    rasterize_gbuffer,
    ray_directions,
    read_scene,
    resample_light,
    sample_scene,
    shade_target,
    shadow_mask,
)
from gisforge.gbuffer import (
    DatasetError,
    MaterialPalette,
    open_dataset,
    read_sample,
    validate_sample,
)

PALETTE = MaterialPalette()


def _scene(primitives, size=(32, 32), light=(0.0, 1.0, 0.0), noise=0.0, ambient=0.2):
    physics = tuple(
        MaterialPhysics((0.5, 0.5, 0.5), 0.0, 8.0) for _ in range(len(PALETTE))
    )
    return SceneSpec(
        primitives=tuple(primitives),
        light=Light(light, 1.0, ambient),
        camera=Camera(height=1.0, z_near=1.0, size=size, focal=1.2 * size[1]),
        backdrop=Backdrop(
            sky_top=(0.6, 0.7, 0.8),
            sky_bottom=(0.8, 0.8, 0.9),
            ground=(0.4, 0.4, 0.4),
            noise_amplitude=noise,
            noise_cells=4,
            noise_seed=1,
            shadow_factor=0.5,
        ),
        physics=physics,
    )


def test_ray_directions():
    camera = Camera(height=1.0, z_near=1.0, size=(4, 6), focal=3.0)
    dirs = ray_directions(camera)
    assert dirs.shape == (4, 6, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    np.testing.assert_allclose(dirs[2, 3], (0, 0, -1))
    assert dirs[0, 3, 1] > 0
    assert dirs[2, 0, 0] < 0


def test_sphere_on_axis():
    scene = _scene([Primitive('sphere', (0.0, 0.0, -5.0), (1.0,), 3)])
    sample = rasterize_gbuffer(scene)
    assert sample.mask[16, 16] == 1
    assert sample.depth[16, 16] == pytest.approx(4.0, abs=1e-5)
    np.testing.assert_allclose(sample.normals[16, 16], (0, 0, 1), atol=1e-6)
    assert sample.materials[16, 16, 3] == 1
    assert sample.mask[0, 0] == 0 and sample.depth[0, 0] == 0
    assert validate_sample(sample, PALETTE, levels=4).ok


def test_box_face_normal():
    box = Primitive('box', (0.0, 0.0, -5.0), (0.5, 0.5, 0.5), 0)
    dirs = ray_directions(Camera(1.0, 1.0, (8, 8), 9.6))
    t, normals = intersect(box, np.zeros(3), dirs)
    assert t[4, 4] == pytest.approx(4.5)
    np.testing.assert_array_equal(normals[4, 4], (0, 0, 1))
    assert np.isinf(t[0, 0])


def test_sphere_behind_camera_is_missed():
    sphere = Primitive('sphere', (0.0, 0.0, 5.0), (1.0,), 0)
    dirs = ray_directions(Camera(1.0, 1.0, (4, 4), 4.8))
    t, _ = intersect(sphere, np.zeros(3), dirs)
    assert np.all(np.isinf(t))


def test_unknown_shape():
    with pytest.raises(ValueError):
        intersect(Primitive('cone', (0, 0, -5), (1,), 0), np.zeros(3), np.ones((1, 3)))


def test_nearest_primitive_wins():
    near = Primitive('sphere', (0.0, 0.0, -4.0), (0.5,), 1)
    far = Primitive('sphere', (0.0, 0.0, -8.0), (2.0,), 2)
    sample = rasterize_gbuffer(_scene([far, near]))
    assert sample.materials[16, 16, 1] == 1
    assert sample.depth[16, 16] == pytest.approx(3.5, abs=1e-5)


def test_empty_scene():
    sample = rasterize_gbuffer(_scene([]))
    assert not sample.mask.any()
    assert validate_sample(sample, PALETTE).ok


def test_backdrop_quantized():
    sample = rasterize_gbuffer(_scene([], noise=0.06))
    levels = sample.background * 255
    np.testing.assert_allclose(levels, np.round(levels), atol=1e-3)


def test_shade_lambert():
    # Light along +z faces the sphere's nearest point head on.
    scene = _scene(
        [Primitive('sphere', (0.0, 0.0, -5.0), (1.0,), 0)], light=(0.0, 0.0, 1.0)
    )
    sample = rasterize_gbuffer(scene)
    target = shade_target(scene, sample)
    # ambient * albedo + intensity * n.l * albedo
    np.testing.assert_allclose(target[16, 16], 0.2 * 0.5 + 1.0 * 0.5, atol=1e-3)
    np.testing.assert_allclose(target[0, 0], sample.background[0, 0], atol=1e-6)
    assert target.min() >= 0 and target.max() <= 1


def test_shade_glass_blends_background():
    physics = list(_scene([]).physics)
    physics[5] = MaterialPhysics((0.5, 0.5, 0.5), 0.0, 8.0, alpha=0.4)
    scene = _scene(
        [Primitive('sphere', (0.0, 0.0, -5.0), (1.0,), 5)], light=(0.0, 0.0, 1.0)
    )
    scene = SceneSpec(
        scene.primitives, scene.light, scene.camera, scene.backdrop, tuple(physics)
    )
    sample = rasterize_gbuffer(scene)
    target = shade_target(scene, sample)
    expected = 0.4 * 0.6 + 0.6 * sample.background[16, 16]
    np.testing.assert_allclose(target[16, 16], expected, atol=1e-3)


def test_shadow_under_object():
    scene = _scene(
        [Primitive('sphere', (0.0, -0.5, -4.0), (0.5,), 0)], light=(0.0, 1.0, 0.0)
    )
    shadow = shadow_mask(scene)
    sample = rasterize_gbuffer(scene)
    target = shade_target(scene, sample)
    ground = ~sample.foreground & shadow
    assert ground.any()
    np.testing.assert_allclose(
        target[ground], sample.background[ground] * 0.5, atol=1e-6
    )
    assert not shadow[0].any()


def test_sample_scene_deterministic(tiny_ranges):
    assert sample_scene(5, tiny_ranges) == sample_scene(5, tiny_ranges)
    assert sample_scene(5, tiny_ranges) != sample_scene(6, tiny_ranges)


def test_sample_scene_ranges(tiny_ranges):
    for seed in range(20):
        scene = sample_scene(seed, tiny_ranges)
        assert 1 <= len(scene.primitives) <= 2
        assert tiny_ranges.ambient[0] <= scene.light.ambient <= tiny_ranges.ambient[1]
        assert scene.light.direction[1] > 0
        for prim in scene.primitives:
            assert prim.shape in ('sphere', 'box')
            assert 0 <= prim.material_id < len(PALETTE)
            # Primitives rest on the ground plane.
            bottom = prim.center[1] - prim.size[0 if prim.shape == 'sphere' else 1]
            assert bottom == pytest.approx(-scene.camera.height)


def test_resample_light_keeps_geometry(tiny_ranges):
    scene = sample_scene(3, tiny_ranges)
    relit = resample_light(scene, 99, tiny_ranges)
    assert relit.primitives == scene.primitives
    assert relit.backdrop == scene.backdrop
    assert relit.light != scene.light


def test_scene_ranges_validation():
    with pytest.raises(ConfigError):
        SceneRanges(radius=(1.0, 0.5))
    with pytest.raises(ConfigError):
        SceneRanges(shapes=('cone',))
    with pytest.raises(ConfigError):
        SceneRanges(shadow_factor=1.5)
    ranges = SceneRanges.from_config(default_config())
    assert ranges == SceneRanges()


def test_generate_sample_valid(tiny_ranges):
    for seed in range(10):
        _, sample = generate_sample(seed, tiny_ranges)
        assert sample.target is not None
        report = validate_sample(sample, PALETTE, levels=3)
        assert report.ok, report.messages


def test_derive_seed():
    assert derive_seed(7, 0) == derive_seed(7, 0)
    assert len({derive_seed(7, i) for i in range(100)}) == 100
    assert derive_seed(7, 0) != derive_seed(8, 0)


def test_generate_dataset(tiny_dataset, tiny_ranges):
    with open(os.path.join(tiny_dataset, 'manifest.json')) as f:
        manifest = json.load(f)
    assert manifest['seed'] == 3
    assert manifest['size'] == [32, 32]
    assert manifest['palette'] == list(PALETTE.names)
    assert [s['name'] for s in manifest['samples']] == [
        '000000',
        '000001',
        '000002',
        '000003',
    ]
    entry = manifest['samples'][2]
    assert entry['seed'] == derive_seed(3, 2)
    scene = read_scene(os.path.join(tiny_dataset, '000002'))
    assert scene == sample_scene(entry['seed'], tiny_ranges, PALETTE)


def test_generate_dataset_reproducible(tiny_dataset, tiny_ranges, tmpdir):
    root = str(tmpdir.join('again'))
    generate_dataset(2, 3, root, tiny_ranges, workers=2)
    for name in ('000000', '000001'):
        first = read_sample(os.path.join(tiny_dataset, name))
        second = read_sample(os.path.join(root, name))
        np.testing.assert_array_equal(first.normals, second.normals)
        np.testing.assert_array_equal(first.target, second.target)
        np.testing.assert_array_equal(first.background, second.background)
    assert len(open_dataset(root)) == 2


def test_generate_dataset_failure(tiny_ranges, tmpdir):
    blocker = tmpdir.join('data')
    blocker.mkdir()
    # A file where a sample directory belongs.
    blocker.join('000001').write('')
    with pytest.raises(DatasetError) as e:
        generate_dataset(3, 3, str(blocker), tiny_ranges, workers=1)
    assert e.value.index == 1
    assert not blocker.join('manifest.json').exists()


def test_backdrop_only(tiny_ranges):
    image = backdrop_only(4, tiny_ranges)
    assert image.shape == (32, 32, 3)
    assert image.dtype == np.float32
    np.testing.assert_array_equal(image, backdrop_only(4, tiny_ranges))


@pytest.mark.slow
def test_generated_samples_validate(tiny_ranges):
    for seed in range(500):
        _, sample = generate_sample(seed, tiny_ranges)
        report = validate_sample(sample, PALETTE, levels=3)
        assert report.ok, (seed, report.messages)


def test_stored_samples_reshade(tiny_dataset):
    for name in ('000000', '000001', '000002', '000003'):
        directory = os.path.join(tiny_dataset, name)
        stored = read_sample(directory, PALETTE)
        shaded = shade_target(read_scene(directory), stored)
        np.testing.assert_allclose(shaded, stored.target, atol=1 / 255)


@pytest.mark.slow
def test_palette_coverage(tiny_ranges):
    seen = set()
    for seed in range(200):
        sample = rasterize_gbuffer(sample_scene(seed, tiny_ranges))
        seen.update(np.argmax(sample.materials[sample.foreground], axis=-1).tolist())
    assert seen == set(range(len(PALETTE)))


@pytest.mark.slow
def test_shadowed_ground_is_darker(tiny_ranges):
    shadowed = 0
    for seed in range(100):
        scene, sample = generate_sample(seed, tiny_ranges)
        ground = ~sample.foreground & shadow_mask(scene)
        shadowed += int(ground.sum())
        assert np.all(sample.target[ground] <= sample.background[ground] + 1e-6)
    assert shadowed > 0


@pytest.mark.slow
def test_relighting_changes_foreground(tiny_ranges):
    changes = []
    for seed in range(50):
        scene, sample = generate_sample(seed, tiny_ranges)
        fg = sample.foreground
        if not fg.any():
            continue
        target = shade_target(resample_light(scene, seed + 1000, tiny_ranges), sample)
        changes.append(abs(target[fg].mean() - sample.target[fg].mean()))
    assert len(changes) >= 40
    # A fresh light rarely reproduces the foreground brightness.
    assert np.mean(np.array(changes) > 1e-3) >= 0.9
