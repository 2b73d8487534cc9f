import json

import numpy as np
import pytest

from civiscan import corpus
from civiscan.corpus import (
    CorpusConfig,
    CorpusError,
    DanglingImageError,
    DatasetManifest,
    GroundTruthRegion,
    IssueClass,
    ManifestParseError,
    SceneConditions,
    largest_remainder_counts,
    load_manifest,
    render_scene,
    save_manifest,
    split_train_val,
)


def apportion_oracle(n, fractions):
    """Independent largest-remainder computation."""
    quotas = [n * f for f in fractions]
    floors = [int(q) for q in quotas]
    rem = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in rem[: n - sum(floors)]:
        floors[i] += 1
    return floors


# --- render_scene ------------------------------------------------------------


def test_render_scene_deterministic():
    cond = SceneConditions()
    a, ra = render_scene(IssueClass.WASTE_DISPOSAL, cond, 128, seed=7)
    b, rb = render_scene(IssueClass.WASTE_DISPOSAL, cond, 128, seed=7)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert ra == rb


def test_render_scene_pothole_darker_than_background():
    cond = SceneConditions("daylight", "clear", "simple", "summer")
    for seed in range(5):
        img, regions = render_scene(IssueClass.INFRASTRUCTURE_DAMAGE, cond, 256, seed=seed)
        mask = np.zeros((256, 256), dtype=bool)
        for r in regions:
            x, y, w, h = r.bbox
            mask[y : y + h, x : x + w] = True
        lum = img.pixels.mean(axis=2)
        assert lum[mask].mean() < lum[~mask].mean()


def test_render_scene_low_light_scales_mean():
    for cls in IssueClass:
        day, _ = render_scene(cls, SceneConditions("daylight", "clear", "simple", "autumn"), 128, seed=3)
        low, _ = render_scene(cls, SceneConditions("low_light", "clear", "simple", "autumn"), 128, seed=3)
        assert abs(low.pixels.mean() - 0.35 * day.pixels.mean()) <= 1e-6


def test_render_scene_boxes_inside_image():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cls = IssueClass(int(rng.integers(0, 3)))
        cond = SceneConditions(
            lighting=corpus.LIGHTING[int(rng.integers(0, 2))],
            weather=corpus.WEATHER[int(rng.integers(0, 2))],
            clutter=corpus.CLUTTER[int(rng.integers(0, 2))],
            season=corpus.SEASONS[int(rng.integers(0, 4))],
        )
        img, regions = render_scene(cls, cond, 128, seed=int(rng.integers(0, 1 << 32)))
        assert regions
        for r in regions:
            x, y, w, h = r.bbox
            assert 0 <= x and 0 <= y and x + w <= 128 and y + h <= 128


def test_render_scene_rejects_small_size():
    with pytest.raises(CorpusError):
        render_scene(IssueClass.WASTE_DISPOSAL, SceneConditions(), 32, seed=0)


# --- apportionment -------------------------------------------------------------


def test_class_counts_paper_defaults():
    counts = largest_remainder_counts(5712, (0.45, 0.30, 0.25))
    assert counts == apportion_oracle(5712, (0.45, 0.30, 0.25)) == [2570, 1714, 1428]


def test_apportionment_properties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(0, 10_000))
        raw = rng.random(3) + 1e-9
        mix = tuple(raw / raw.sum())
        counts = largest_remainder_counts(n, mix)
        assert sum(counts) == n
        for c, f in zip(counts, mix):
            assert abs(c - n * f) < 1.0


# --- generate_corpus -------------------------------------------------------------


def test_generate_corpus_small_end_to_end(tmp_path):
    cfg = CorpusConfig(n_images=40, seed=11, image_size=64)
    manifest = corpus.generate_corpus(cfg, tmp_path)
    assert len(manifest) == 40
    assert manifest.class_counts() == tuple(apportion_oracle(40, cfg.class_mix))
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert len(loaded) == 40
    for got, want in zip(loaded.records, manifest.records):
        assert got == want


def test_generate_corpus_deterministic_trees(tmp_path):
    cfg = CorpusConfig(n_images=12, seed=5, image_size=64)
    m1 = corpus.generate_corpus(cfg, tmp_path / "a")
    m2 = corpus.generate_corpus(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for rec in m1.records:
        assert (tmp_path / "a" / rec.image_path).read_bytes() == (tmp_path / "b" / rec.image_path).read_bytes()


def test_generate_corpus_empty(tmp_path):
    manifest = corpus.generate_corpus(CorpusConfig(n_images=0), tmp_path)
    assert len(manifest) == 0
    assert not list((tmp_path / "images").glob("*.ppm"))
    assert load_manifest(tmp_path / "manifest.jsonl").records == []


def test_generate_corpus_condition_rates(tmp_path):
    cfg = CorpusConfig(n_images=1000, seed=2, image_size=64)
    manifest = corpus.generate_corpus(cfg, tmp_path)
    stats = corpus.corpus_stats(manifest)
    assert abs(stats["low_light_rate"] - 0.35) <= 0.02
    assert abs(stats["adverse_weather_rate"] - 0.20) <= 0.02
    assert abs(stats["clutter_rate"] - 0.25) <= 0.02


def test_generate_corpus_validates_config(tmp_path):
    with pytest.raises(CorpusError, match="class_mix"):
        corpus.generate_corpus(CorpusConfig(class_mix=(0.5, 0.5, 0.5)), tmp_path)
    with pytest.raises(CorpusError, match="low_light_rate"):
        corpus.generate_corpus(CorpusConfig(low_light_rate=1.5), tmp_path)


# --- split ------------------------------------------------------------------------


def _fake_manifest(n, counts=None):
    recs = []
    if counts is None:
        classes = [IssueClass(i % 3) for i in range(n)]
    else:
        classes = []
        for c, k in zip(IssueClass, counts):
            classes += [c] * k
    for i, c in enumerate(classes):
        recs.append(
            corpus.ManifestRecord(
                image_path=f"images/{i:06d}.ppm",
                cls=c,
                conditions=SceneConditions(),
                regions=[GroundTruthRegion((0, 0, 4, 4), c)],
                location=(45.0, 25.0),
                seed_used=i,
            )
        )
    return DatasetManifest(recs)


def test_split_sizes_paper_counts():
    manifest = _fake_manifest(5712, counts=(2570, 1714, 1428))
    train, val = split_train_val(manifest, 0.8, seed=0)
    assert (len(train), len(val)) == (4570, 1142)


def test_split_sizes_exact_division():
    train, val = split_train_val(_fake_manifest(10), 0.8, seed=0)
    assert (len(train), len(val)) == (8, 2)


def test_split_disjoint_exhaustive_stratified():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = int(rng.integers(3, 400))
        manifest = _fake_manifest(n)
        train, val = split_train_val(manifest, 0.8, seed=trial)
        key = lambda r: r.image_path
        train_set = {key(r) for r in train.records}
        val_set = {key(r) for r in val.records}
        assert not (train_set & val_set)
        assert train_set | val_set == {key(r) for r in manifest.records}
        # stratification within one record per class
        for c in range(3):
            total_c = manifest.class_counts()[c]
            val_c = val.class_counts()[c]
            assert abs(val_c - total_c * len(val) / n) <= 1.0


def test_split_empty_manifest_rejected():
    with pytest.raises(CorpusError, match="empty"):
        split_train_val(DatasetManifest([]), 0.8, seed=0)


# --- manifest io -------------------------------------------------------------------


def test_manifest_unknown_class_token(tmp_path):
    rec = corpus.record_to_json(_fake_manifest(1).records[0])
    rec["class"] = "sinkhole"
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestParseError, match="sinkhole"):
        load_manifest(path, check_images=False)


def test_manifest_bad_json_cites_line(tmp_path):
    good = json.dumps(corpus.record_to_json(_fake_manifest(1).records[0]))
    path = tmp_path / "m.jsonl"
    path.write_text(good + "\n{oops\n")
    with pytest.raises(ManifestParseError, match="line 2"):
        load_manifest(path, check_images=False)


def test_manifest_empty_file(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("")
    assert load_manifest(path).records == []


def test_manifest_dangling_image(tmp_path):
    manifest = _fake_manifest(1)
    path = tmp_path / "m.jsonl"
    save_manifest(manifest, path)
    with pytest.raises(DanglingImageError, match="000000.ppm"):
        load_manifest(path)
