import math

import numpy as np
import pytest

from crowdpose_kit import synthgen as S
from crowdpose_kit.annotations import (CROWDPOSE_SCHEMA, Dataset, ImageRecord,
                                       Visibility, serialize_dataset)
from crowdpose_kit.crowd_metrics import crowd_index, histogram_bin
from crowdpose_kit.errors import ConfigError, TargetingError
from crowdpose_kit.masks import write_depth_pam, write_pam
from crowdpose_kit.seeding import substream

import oracles


def small_cfg(**kw):
    defaults = dict(image_w=160, image_h=120, person_count_range=(1, 8),
                    scale_range=(40.0, 80.0), seed=77)
    defaults.update(kw)
    return S.SceneConfig(**defaults)


def person_layout(keypoints, z, height=60.0, radius=3.0, template="standing"):
    return S.PersonLayout(template=template, height=height, z=z, radius=radius,
                          keypoints=np.asarray(keypoints, dtype=np.float64))


def standing_keypoints(cx, cy, height=60.0):
    base = np.asarray(S.BUILTIN_TEMPLATES[0].keypoints, dtype=np.float64)
    width = S.BODY_WIDTH_FRAC * height
    out = np.empty((14, 2))
    out[:, 0] = cx - width / 2 + base[:, 0] * width
    out[:, 1] = cy - height / 2 + base[:, 1] * height
    return out


class TestSceneFlags:
    def test_single_person_never_occluded(self, rng):
        cfg = small_cfg(person_count_range=(1, 1))
        for i in range(20):
            record, _ = S.generate_scene(substream(i, "solo"), cfg)
            for kp in record.persons[0].pose.keypoints:
                assert kp.vis is not Visibility.OCCLUDED

    def test_forced_two_person_occlusion(self):
        far = person_layout(standing_keypoints(50, 60), z=0.2)
        near = person_layout(standing_keypoints(50, 60), z=0.9)
        layout = S.SceneLayout(160, 120, [far, near])
        flags = S._layout_flags(layout)
        # the farther person sits fully under the nearer copy
        assert all(v is Visibility.OCCLUDED for v in flags[0])
        assert all(v is not Visibility.OCCLUDED for v in flags[1])

    def test_hip_under_nearer_person(self):
        far = person_layout(standing_keypoints(60, 60), z=0.1)
        hips = standing_keypoints(60, 60)[6]  # left hip pixel of the far person
        near_kps = standing_keypoints(hips[0], hips[1], height=40.0)
        near = person_layout(near_kps, z=0.8, height=40.0, radius=2.4)
        layout = S.SceneLayout(160, 120, [far, near])
        flags = S._layout_flags(layout)
        assert flags[0][6] is Visibility.OCCLUDED

    def test_flags_match_scalar_reference(self, rng):
        cfg = small_cfg(person_count_range=(2, 7))
        for i in range(60):
            layout = S._sample_layout(substream(i, "ref"), cfg,
                                      S.BUILTIN_TEMPLATES,
                                      attach_prob=0.7, attach_sigma=0.4)
            ours = S._layout_flags(layout)
            ref = oracles.scene_flags_reference(layout, S.SKELETON_EDGES,
                                                S._EDGES_OF_KP)
            assert ours == ref, f"scene {i}"

    def test_keypoints_near_own_bbox(self, rng):
        cfg = small_cfg()
        record, _ = S.generate_scene(substream(1, "bbox"), cfg)
        for person in record.persons:
            for kp in person.pose.keypoints:
                assert person.bbox.x <= kp.x <= person.bbox.x + person.bbox.w
                assert person.bbox.y <= kp.y <= person.bbox.y + person.bbox.h


class TestRenderConsistency:
    def test_raster_and_depth_agree_with_flags(self):
        cfg = small_cfg(person_count_range=(3, 6))
        for i in range(10):
            rng = substream(i, "render")
            layout = S._sample_layout(rng, cfg, S.BUILTIN_TEMPLATES,
                                      attach_prob=0.8, attach_sigma=0.35)
            record = S._layout_record(layout, f"s{i}")
            raster, depth = S.render_layout(layout)
            color_to_person = {S.person_color(j): j
                               for j in range(len(layout.persons))}
            for pi, person in enumerate(record.persons):
                for kp in person.pose.keypoints:
                    px, py = int(math.floor(kp.x)), int(math.floor(kp.y))
                    if not (0 <= px < raster.width and 0 <= py < raster.height):
                        continue
                    rgb = tuple(int(v) for v in raster.pixels[py, px, :3])
                    owner = color_to_person.get(rgb)
                    assert owner is not None, "keypoint pixel must be painted"
                    assert depth[py, px] == layout.persons[owner].z
                    occluded = kp.vis is Visibility.OCCLUDED
                    assert occluded == (owner != pi)

    def test_determinism_byte_identical(self):
        cfg = small_cfg()
        outs = []
        for _ in range(2):
            record, raster = S.generate_scene(substream(5, "det"), cfg)
            _, depth = S.render_layout(
                S._sample_layout(substream(5, "det2"), cfg, S.BUILTIN_TEMPLATES))
            ds = Dataset(schema=CROWDPOSE_SCHEMA, images=(record,))
            outs.append((serialize_dataset(ds), write_pam(raster),
                         write_depth_pam(depth)))
        assert outs[0] == outs[1]

    def test_person_colors_distinct(self):
        colors = {S.person_color(i) for i in range(200)}
        assert len(colors) == 200


class TestSceneConfigValidation:
    def test_person_larger_than_image(self):
        with pytest.raises(ConfigError):
            S.SceneConfig(image_w=50, image_h=40, scale_range=(60.0, 80.0))

    def test_bad_count_range(self):
        with pytest.raises(ConfigError):
            S.SceneConfig(person_count_range=(0, 3))

    def test_template_validation(self):
        with pytest.raises(ConfigError):
            S.PoseTemplate("bad", tuple([(0.5, 1.5)] * 14), (0.0,) * 14)
        with pytest.raises(ConfigError):
            S.PoseTemplate("short", tuple([(0.5, 0.5)] * 5), (0.0,) * 5)

    def test_empty_templates(self):
        with pytest.raises(ConfigError):
            S.generate_scene(substream(0, "e"), small_cfg(), templates=())


class TestTargetedScene:
    def test_target_crowd_index_honored(self):
        cfg = small_cfg(person_count_range=(2, 8), target_crowd_index=0.5,
                        attach_prob=0.8, attach_sigma=0.35)
        record, _ = S.generate_scene(substream(3, "tc"), cfg)
        assert abs(crowd_index(record) - 0.5) <= 0.05

    def test_unreachable_target(self):
        cfg = small_cfg(person_count_range=(1, 1), target_crowd_index=0.9)
        with pytest.raises(TargetingError):
            S.generate_scene(substream(3, "un"), cfg)


class TestCorpus:
    def test_quota_split(self):
        assert S._quotas((0.5, 0.5), 5) == [3, 2]
        assert S._quotas((0.1,) * 10, 2000) == [200] * 10
        assert sum(S._quotas((0.33, 0.33, 0.34), 10)) == 10

    def test_small_uniform_corpus(self):
        corpus_cfg = S.CorpusConfig(scenes=60, scene_cfg=small_cfg(),
                                    target_histogram=(0.25, 0.25, 0.25, 0.25))
        dataset = S.generate_corpus(corpus_cfg)
        assert len(dataset.images) == 60
        counts = [0, 0, 0, 0]
        for img in dataset.images:
            c = crowd_index(img)
            assert dataset.meta["crowd_index"][img.id] == c
            counts[histogram_bin(c, 4)] += 1
        assert counts == [15, 15, 15, 15]

    def test_easy_target_trivial(self):
        corpus_cfg = S.CorpusConfig(scenes=10, scene_cfg=small_cfg(),
                                    target_histogram=(1.0,))
        dataset = S.generate_corpus(corpus_cfg)
        assert len(dataset.images) == 10

    def test_unreachable_reports_achieved(self):
        cfg = small_cfg(person_count_range=(1, 1))
        corpus_cfg = S.CorpusConfig(scenes=4, scene_cfg=cfg,
                                    target_histogram=(0.0, 0.0, 0.0, 1.0),
                                    retry_factor=5)
        with pytest.raises(TargetingError) as err:
            S.generate_corpus(corpus_cfg)
        assert err.value.achieved is not None

    def test_corpus_determinism(self):
        corpus_cfg = S.CorpusConfig(scenes=12, scene_cfg=small_cfg(),
                                    target_histogram=(0.5, 0.5))
        a = serialize_dataset(S.generate_corpus(corpus_cfg))
        b = serialize_dataset(S.generate_corpus(corpus_cfg))
        assert a == b

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            S.CorpusConfig(scenes=5, scene_cfg=small_cfg(),
                           target_histogram=(0.5, 0.4))
        with pytest.raises(ConfigError):
            S.CorpusConfig(scenes=1, scene_cfg=small_cfg(),
                           target_histogram=(0.5, 0.5))


def uniform_keypoint_dataset(rng, images=40):
    """Keypoints drawn uniformly inside their own bbox."""
    from crowdpose_kit.annotations import BBox, PersonInstance
    from conftest import rand_pose
    records = []
    for i in range(images):
        box = BBox(float(rng.uniform(0, 60)), float(rng.uniform(0, 40)),
                   float(rng.uniform(30, 80)), float(rng.uniform(40, 90)))
        persons = tuple(PersonInstance(bbox=box, pose=rand_pose(rng, box))
                        for _ in range(int(rng.integers(1, 4))))
        records.append(ImageRecord(f"u{i}", 200, 160, persons=persons))
    return Dataset(schema=CROWDPOSE_SCHEMA, images=tuple(records))


class TestDensityMap:
    def test_zero_jitter_single_cell(self):
        template = S._template("frozen", 0.0, list(S.BUILTIN_TEMPLATES[0].keypoints))
        cfg = small_cfg(person_count_range=(3, 3), scale_range=(60.0, 60.0))
        layouts = [S._sample_layout(substream(i, "dm"), cfg, (template,))
                   for i in range(10)]
        records = tuple(S._layout_record(layout, f"d{i}")
                        for i, layout in enumerate(layouts))
        ds = Dataset(schema=CROWDPOSE_SCHEMA, images=records)
        # bins=7 keeps the symmetric template's u=0.5 off any bin edge
        for name in ("neck", "left_wrist"):
            grid = S.keypoint_density_map(ds, name, bins=7)
            assert grid.sum() == 30
            assert (grid > 0).sum() == 1

    def test_sum_conservation(self, rng):
        ds = uniform_keypoint_dataset(rng)
        labeled = sum(1 for img in ds.images for p in img.persons
                      for k in p.pose.keypoints
                      if k.vis is not Visibility.UNLABELED)
        grid = S.keypoint_density_map(ds, "neck", bins=8)
        total = sum(S.keypoint_density_map(ds, n, bins=8).sum()
                    for n in CROWDPOSE_SCHEMA.keypoint_names)
        assert total == labeled

    def test_uniform_keypoints_roughly_flat(self, rng):
        # chi-square sanity, not exactness
        ds = uniform_keypoint_dataset(rng, images=120)
        grid = S.keypoint_density_map(ds, "neck", bins=4).astype(float)
        n = grid.sum()
        expected = n / 16.0
        chi2 = ((grid - expected) ** 2 / expected).sum()
        assert chi2 < 60.0  # 15 dof; generous bound

    def test_bad_args(self, rng):
        ds = uniform_keypoint_dataset(rng, images=2)
        with pytest.raises(ConfigError):
            S.keypoint_density_map(ds, "neck", bins=1)
        with pytest.raises(ConfigError):
            S.keypoint_density_map(ds, "nose", bins=4)
