import logging

import numpy as np
import pytest
from PIL import Image

from lamps.data import (
    LANDMARK_HEADER,
    LANDMARK_NAMES,
    LANDMARK_STRUCTURES,
    LandmarkAnnotation,
    LandmarkError,
    PhantomSpec,
    export_phantoms,
    generate_phantom,
    ingest_folder,
    load_landmarks,
    load_pairs,
    phantom_dataset,
    render_phantom,
    standardize,
    write_landmarks,
)
from lamps.geometry import ConfigError, GridSpec, make_grid
from lamps.zeroshot import CoordinateStubEncoder, coordinate_image, extract_local_embedding


def test_zero_jitter_phantoms_are_identical():
    spec = PhantomSpec(position_sigma=0, scale_sigma=0, structure_sigma=0, intensity_sigma=0, noise=0)
    a, la = generate_phantom(spec, 1, "x")
    b, lb = generate_phantom(spec, 2, "x")
    assert np.array_equal(a, b)
    assert la == lb


def test_phantom_is_seed_deterministic_and_varies():
    spec = PhantomSpec()
    a, la = generate_phantom(spec, 5)
    b, lb = generate_phantom(spec, 5)
    c, lc = generate_phantom(spec, 6)
    assert np.array_equal(a, b) and la == lb
    assert not np.array_equal(a, c)
    assert a.dtype == np.float32 and a.shape == (144, 144)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_thirteen_landmarks_with_unique_names():
    _, marks = generate_phantom(PhantomSpec(), 0, "p")
    assert len(marks) == 13
    assert [m.landmark_name for m in marks] == list(LANDMARK_NAMES)


@pytest.mark.parametrize("seed", range(20))
def test_landmarks_lie_inside_their_structure(seed):
    _, marks, supports = render_phantom(PhantomSpec(), seed)
    for name, (x, y) in marks.items():
        assert supports[LANDMARK_STRUCTURES[name]][int(y), int(x)] > 0.5, name


def test_spec_bounds_violation_raises():
    with pytest.raises(ConfigError):
        PhantomSpec(position_sigma=0.2).validate()
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(right_lung=(0.1, 0.5, 0.13, 0.27)), 0)
    with pytest.raises(ConfigError):
        PhantomSpec(noise=-1).validate()


def test_phantom_dataset_is_standardized():
    ds = phantom_dataset(PhantomSpec(), 4, seed=3)
    assert ds.ids == ["p00000", "p00001", "p00002", "p00003"]
    assert ds.tensor().shape == (4, 1, 144, 144)
    for _, img in ds.items:
        assert abs(img.mean()) < 1e-5 and abs(img.var() - 1) < 1e-3
    assert len(ds.landmarks_by_image()["p00002"]) == 13


def test_standardize_constant_image():
    assert np.array_equal(standardize(np.full((4, 4), 7.0)), np.zeros((4, 4), dtype=np.float32))


def _write_folder(tmp_path, n_valid=10, corrupt=True):
    rng = np.random.default_rng(0)
    for i in range(n_valid):
        mode = "RGB" if i % 2 else "L"
        shape = (40, 30, 3) if mode == "RGB" else (40, 30)
        Image.fromarray(rng.integers(0, 255, size=shape, dtype=np.uint8), mode).save(tmp_path / f"img{i:02d}.png")
    if corrupt:
        (tmp_path / "broken.png").write_bytes(b"not an image at all")
    return tmp_path


def test_ingest_skips_corrupt_and_reports(tmp_path, caplog):
    folder = tmp_path / "imgs"
    folder.mkdir()
    _write_folder(folder)
    manifest = tmp_path / "manifest.txt"
    with caplog.at_level(logging.WARNING):
        ds = ingest_folder(folder, GridSpec(18, 2), manifest=manifest)
    assert len(ds) == 10
    assert ds.skipped == ["broken.png"]
    assert manifest.read_text().splitlines() == ["skipped\tbroken.png"]
    assert "broken.png" in caplog.text
    assert ds.tensor().shape == (10, 1, 36, 36)
    assert ds.source_sizes["img03"] == (30, 40)
    for _, img in ds.items:
        assert abs(img.mean()) < 1e-5 and abs(img.var() - 1) < 1e-3


def test_ingest_order_is_sorted_and_stable(tmp_path):
    _write_folder(tmp_path, corrupt=False)
    a = ingest_folder(tmp_path, GridSpec(18, 2))
    b = ingest_folder(tmp_path, GridSpec(18, 2))
    assert a.ids == b.ids == sorted(a.ids)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.items, b.items))


def test_ingest_resizes_1024_to_default_grid(tmp_path):
    Image.fromarray(np.random.default_rng(1).integers(0, 255, (1024, 1024), dtype=np.uint8)).save(tmp_path / "a.png")
    ds = ingest_folder(tmp_path, make_grid(576, 18))
    assert ds.image("a").shape == (576, 576)


def test_ingest_empty_folder_raises(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"xx")
    with pytest.raises(ValueError, match="no decodable"):
        ingest_folder(tmp_path, GridSpec(18, 2))


def _csv(tmp_path, body):
    path = tmp_path / "lm.csv"
    path.write_text(",".join(LANDMARK_HEADER) + "\n" + body)
    return path


def test_landmark_rescale_floor(tmp_path):
    path = _csv(tmp_path, "p001,heart_apex,512,600\n")
    (a,) = load_landmarks(path, {"p001": (1024, 1024)}, target_pixels=576)
    assert (a.x, a.y) == (288, 337)


def test_landmark_csv_edge_cases(tmp_path):
    sizes = {"p001": (100, 100)}
    assert load_landmarks(_csv(tmp_path, ""), sizes) == []
    with pytest.raises(LandmarkError, match="duplicate"):
        load_landmarks(_csv(tmp_path, "p001,heart_apex,1,2\np001,heart_apex,3,4\n"), sizes)
    with pytest.raises(LandmarkError, match=":3:"):
        load_landmarks(_csv(tmp_path, "p001,heart_apex,1,2\np001,heart_top,3\n"), sizes)
    with pytest.raises(LandmarkError, match="non-integer"):
        load_landmarks(_csv(tmp_path, "p001,heart_apex,1.5,2\n"), sizes)
    with pytest.raises(LandmarkError, match="outside"):
        load_landmarks(_csv(tmp_path, "p001,heart_apex,100,2\n"), sizes)
    with pytest.raises(LandmarkError, match="unknown image"):
        load_landmarks(_csv(tmp_path, "p002,heart_apex,1,2\n"), sizes)
    with pytest.raises(LandmarkError, match="unknown landmark"):
        load_landmarks(_csv(tmp_path, "p001,nose,1,2\n"), sizes)
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("id,name,x,y\n")
    with pytest.raises(LandmarkError, match="header"):
        load_landmarks(bad_header, sizes)


def test_landmark_write_read_roundtrip(tmp_path):
    rows = [LandmarkAnnotation("a", "heart_apex", 3, 4), LandmarkAnnotation("a", "heart_top", 5, 6)]
    write_landmarks(tmp_path / "x.csv", rows)
    assert load_landmarks(tmp_path / "x.csv", {"a": (10, 10)}) == rows


def test_export_phantoms_roundtrip(tmp_path):
    out = export_phantoms(tmp_path / "ph", PhantomSpec(), 4, seed=2)
    ds = ingest_folder(out, GridSpec(18, 8))
    assert ds.ids == ["p00000", "p00001", "p00002", "p00003"]
    marks = load_landmarks(out / "landmarks.csv", ds.source_sizes, target_pixels=144)
    assert len(marks) == 52
    _, direct = generate_phantom(PhantomSpec(), 2 * 1_000_003 + 1, "p00001")
    assert [m for m in marks if m.image_id == "p00001"] == direct
    assert load_pairs(out / "pairs.csv") == [("p00000", "p00001"), ("p00002", "p00003")]


def test_landmark_ground_truth_survives_pipeline(tmp_path):
    # 288^2 source rescaled to 144^2: the extracted token must be the cell holding the rescaled point,
    # and that point must still sit on the rendered structure
    spec = PhantomSpec(image_pixels=288)
    image, marks, supports = render_phantom(spec, 4)
    Image.fromarray(np.round(image * 255).astype(np.uint8)).save(tmp_path / "p.png")
    _, annotations = generate_phantom(spec, 4, "p")
    write_landmarks(tmp_path / "lm.csv", annotations)
    ds = ingest_folder(tmp_path, GridSpec(18, 8))
    rescaled = load_landmarks(tmp_path / "lm.csv", ds.source_sizes, target_pixels=144)
    stub = CoordinateStubEncoder(8, 144)
    coords = coordinate_image(144, 144)
    for a in rescaled:
        x0, y0 = extract_local_embedding(stub, coords, (a.x, a.y))
        assert x0 <= a.x < x0 + 8 and y0 <= a.y < y0 + 8
        structure = supports[LANDMARK_STRUCTURES[a.landmark_name]]
        assert structure[2 * a.y : 2 * a.y + 2, 2 * a.x : 2 * a.x + 2].max() > 0.5, a.landmark_name
