import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnreid.data import (
    EmptyDatasetWarning,
    ManifestError,
    generate_synthetic,
    load_folder_dataset,
    make_identities,
    normalize_images,
    parse_manifest,
    write_folder_dataset,
)
from attnreid.retrieval import distance_matrix, evaluate


@pytest.fixture(scope="module")
def desk_set():
    return generate_synthetic(50, 64, 20, 3, (64, 32), seed=7)


def test_desk_counts_and_splits(desk_set):
    ds, manifest = desk_set
    counts = manifest.counts()
    assert counts == {"train": 1000, "query": 64 * 3, "gallery": 64 * 17}
    assert ds.images.shape == (len(ds), 64, 32, 3) and ds.images.dtype == np.uint8
    assert ds.num_ids("train") == 50 and ds.num_ids("query") == 64
    manifest.check()
    assert not manifest.ids("train") & manifest.ids("gallery")
    assert manifest.ids("query") == manifest.ids("gallery")
    assert len(set(ds.paths)) == len(ds)
    assert set(ds.cams.tolist()) == {0, 1, 2}


def test_every_query_has_a_cross_camera_match(desk_set):
    ds, _ = desk_set
    q, g = ds.split("query"), ds.split("gallery")
    for pid, cam in zip(q.pids, q.cams):
        assert np.any((g.pids == pid) & (g.cams != cam))


def test_generation_is_deterministic():
    a, _ = generate_synthetic(3, 2, 4, 2, (32, 16), seed=11)
    b, _ = generate_synthetic(3, 2, 4, 2, (32, 16), seed=11)
    c, _ = generate_synthetic(3, 2, 4, 2, (32, 16), seed=12)
    assert np.array_equal(a.images, b.images) and a.paths == b.paths
    assert not np.array_equal(a.images, c.images)


def test_domains_differ():
    src, _ = generate_synthetic(3, 2, 4, 2, (32, 16), seed=1, domain="source")
    tgt, _ = generate_synthetic(3, 2, 4, 2, (32, 16), seed=1, domain="target")
    assert not np.array_equal(src.images, tgt.images)
    with pytest.raises(ValueError):
        generate_synthetic(3, 2, 4, 2, seed=1, domain="night")


def test_generator_argument_checks():
    with pytest.raises(ValueError):
        generate_synthetic(3, 2, 4, 1)
    with pytest.raises(ValueError):
        generate_synthetic(3, 2, 2, 3)


def test_identities_have_distinct_appearance():
    ids = make_identities(200, np.random.default_rng(0))
    assert len({i.appearance() for i in ids}) == 200
    assert [i.id for i in ids] == list(range(200))


def test_raw_pixels_beat_chance(desk_set):
    """Nearest neighbour on raw pixels must beat random ranking, but not trivially solve the task."""
    ds, _ = desk_set
    q, g = ds.split("query"), ds.split("gallery")
    qf = q.tensor().reshape(len(q), -1).astype(np.float64)
    gf = g.tensor().reshape(len(g), -1).astype(np.float64)
    res = evaluate(distance_matrix(qf, gf, "euclidean"), q.pids, q.cams, g.pids, g.cams)
    assert res.rank(1) > 1 / 64
    assert res.mAP < 0.9


def test_normalize_images():
    imgs = np.array([[[[0, 255, 127]]]], dtype=np.uint8)
    out = normalize_images(imgs, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), np.float64)
    assert out.shape == (1, 3, 1, 1)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0, 127 / 127.5 - 1.0])
    assert normalize_images(imgs, (0, 0, 0), (1, 1, 1)).dtype == np.float32


def test_folder_round_trip(tmp_path):
    ds, manifest = generate_synthetic(3, 2, 4, 2, (32, 16), seed=5)
    path = write_folder_dataset(ds, tmp_path)
    assert path.name == "manifest.txt"
    back = load_folder_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.pids, ds.pids) and np.array_equal(back.cams, ds.cams)
    assert list(back.splits) == list(ds.splits) and back.paths == ds.paths
    resized = load_folder_dataset(tmp_path, input_hw=(16, 8))
    assert resized.images.shape[1:] == (16, 8, 3)


def test_manifest_parse_and_errors():
    m = parse_manifest("# header\na.png 1 0 train\n\nb.png 2 1 query  # note\n")
    assert [e.path for e in m.entries] == ["a.png", "b.png"]
    for bad in ("a.png 1 0", "a.png x 0 train", "a.png 1 y train", "a.png 1 0 val"):
        with pytest.raises(ManifestError) as exc:
            parse_manifest("ok.png 1 0 train\n" + bad, "m.txt")
        assert "m.txt:2" in str(exc.value)


def test_manifest_split_discipline():
    with pytest.raises(ManifestError):
        parse_manifest("a.png 1 0 train\nb.png 1 0 gallery\n").check()
    with pytest.raises(ManifestError):
        parse_manifest("a.png 1 0 query\na.png 1 0 gallery\n").check()
    parse_manifest("a.png 1 0 train\nb.png 1 0 gallery\n").check(require_disjoint_train=False)


def test_empty_manifest_warns(tmp_path):
    (tmp_path / "manifest.txt").write_text("# nothing here\n")
    with pytest.warns(EmptyDatasetWarning):
        ds = load_folder_dataset(tmp_path)
    assert len(ds) == 0


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_folder_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("gone.png 1 0 train\n")
    with pytest.raises(FileNotFoundError):
        load_folder_dataset(tmp_path)
    (tmp_path / "x.txt").write_text("not an image")
    (tmp_path / "manifest.txt").write_text("x.txt 1 0 train\n")
    with pytest.raises(ManifestError):
        load_folder_dataset(tmp_path)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(-1, 99), st.integers(0, 5), st.sampled_from(["train", "query", "gallery"])),
                max_size=10))
def test_manifest_text_round_trip(rows):
    text = "".join(f"img{i}.png {p} {c} {s}\n" for i, (p, c, s) in enumerate(rows))
    m = parse_manifest(text)
    assert parse_manifest(m.to_text()).entries == m.entries
