import json
import math

import numpy as np
import pytest

from pudm.data import (
    NORMAL,
    SENSITIVE,
    DataFormatError,
    Geometry,
    Kind,
    generate,
    load_csv,
    load_pu_split,
    make_pu_split,
    membership,
    save_csv,
    save_pu_split,
)
from pudm.metrics import oracle_label

KINDS = list(Kind)


class TestGenerate:
    def test_tiny_gaussians(self):
        ds = generate("two_gaussians", 4, seed=0)
        assert np.sum(ds.labels == NORMAL) == 2 and np.sum(ds.labels == SENSITIVE) == 2
        centers = np.where(ds.labels[:, None] == SENSITIVE, [2.0, 0.0], [-2.0, 0.0])
        assert np.all(np.linalg.norm(ds.points - centers, axis=1) < 6 * 0.5)

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a, b = generate(kind, 500, seed=3), generate(kind, 500, seed=3)
        assert a.points.tobytes() == b.points.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.points, generate(kind, 500, seed=4).points)

    @pytest.mark.parametrize("kind", KINDS)
    def test_balanced_and_label_consistent(self, kind):
        ds = generate(kind, 2001, seed=1)
        assert np.sum(ds.labels == NORMAL) == 1001
        np.testing.assert_array_equal(membership(ds.points, kind, ds.geometry), ds.labels)

    def test_gaussian_class_means(self):
        ds = generate("two_gaussians", 100_000, seed=2)
        se = 0.5 / math.sqrt(50_000)
        for label, cx in ((NORMAL, -2.0), (SENSITIVE, 2.0)):
            # the rejection at x0 = 0 sits 4 std away and shifts the mean by ~1e-4 * std
            mean = ds.points[ds.labels == label].mean(axis=0)
            assert abs(mean[0] - cx) < 3 * se and abs(mean[1]) < 3 * se

    def test_checkerboard_cells_within_board(self):
        g = Geometry(cell=0.5, board=6)
        ds = generate("checkerboard", 3000, seed=0, geometry=g)
        assert np.all(np.abs(ds.points) <= 1.5)
        # every cell of the board is populated
        cells = {tuple(c) for c in np.floor(ds.points / 0.5).astype(int)}
        assert len(cells) == 36

    def test_moons_near_arcs(self):
        ds = generate("two_moons", 2000, seed=0)
        assert np.all(np.abs(ds.points) < 2.0)
        assert ds.points[ds.labels == NORMAL][:, 1].mean() > ds.points[ds.labels == SENSITIVE][:, 1].mean()

    @pytest.mark.parametrize("g", [Geometry(separation=0), Geometry(std=-1), Geometry(board=3), Geometry(cell=0)])
    def test_invalid_geometry(self, g):
        with pytest.raises(ValueError):
            generate("checkerboard", 10, 0, g)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            generate("two_gaussians", 1, 0)
        with pytest.raises(ValueError):
            generate("spirals", 10, 0)


class TestOracleAgreement:
    def test_gaussians_exact(self):
        ds = generate("two_gaussians", 10_000, seed=5)
        np.testing.assert_array_equal(oracle_label(ds.points, "two_gaussians"), ds.labels)

    @pytest.mark.parametrize("kind", ["two_moons", "checkerboard"])
    def test_other_kinds(self, kind):
        ds = generate(kind, 10_000, seed=6)
        assert np.mean(oracle_label(ds.points, kind) == ds.labels) >= 0.99


@pytest.fixture
def pool():
    return generate("two_gaussians", 8000, seed=0)


class TestSplit:
    def test_counts_and_disjointness(self, pool):
        pu = make_pu_split(pool, 2000, 200, 200, 2000, seed=1)
        assert pu.U.shape == (2200, 2) and pu.S.shape == (200, 2) and pu.test_normal.shape == (2000, 2)
        assert np.sum(pool.labels[pu.u_index] == SENSITIVE) == 200
        assert np.all(pool.labels[pu.s_index] == SENSITIVE)
        assert np.all(pool.labels[pu.test_index] == NORMAL)
        all_idx = np.concatenate([pu.u_index, pu.s_index, pu.test_index])
        assert np.unique(all_idx).size == all_idx.size
        np.testing.assert_array_equal(pu.U, pool.points[pu.u_index])
        np.testing.assert_array_equal(pu.u_hidden_labels, pool.labels[pu.u_index])
        assert pu.provenance["contamination"] == pytest.approx(200 / 2200)

    def test_deterministic(self, pool):
        a = make_pu_split(pool, 100, 10, 10, 100, seed=4)
        b = make_pu_split(pool, 100, 10, 10, 100, seed=4)
        np.testing.assert_array_equal(a.u_index, b.u_index)
        np.testing.assert_array_equal(a.s_index, b.s_index)

    def test_clean_unlabeled(self, pool):
        pu = make_pu_split(pool, 100, 0, 10, 10, seed=0)
        assert np.all(pu.u_hidden_labels == NORMAL)
        assert pu.provenance["contamination"] == 0.0

    def test_shortfall_is_exact(self, pool):
        with pytest.raises(ValueError, match=r"short by 10 sensitive points \(need 4010, have 4000\)"):
            make_pu_split(pool, 10, 4000, 10, 10, seed=0)
        with pytest.raises(ValueError, match=r"1 normal points"):
            make_pu_split(pool, 3000, 0, 1, 1001, seed=0)

    def test_negative_counts(self, pool):
        with pytest.raises(ValueError):
            make_pu_split(pool, -1, 0, 0, 0, seed=0)


class TestCsv:
    @pytest.mark.parametrize("kind", KINDS)
    def test_round_trip(self, tmp_path, kind):
        ds = generate(kind, 301, seed=7, geometry=Geometry(separation=1.5, std=0.3))
        save_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert back.points.tobytes() == ds.points.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert (back.kind, back.seed, back.geometry) == (ds.kind, ds.seed, ds.geometry)

    def test_header_survives_byte_exactly(self, tmp_path):
        ds = generate("two_moons", 50, seed=1)
        save_csv(ds, tmp_path / "a.csv")
        save_csv(load_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv").read_text().startswith("# kind=two_moons, seed=1, n=50, ")

    def test_truncated(self, tmp_path):
        ds = generate("two_gaussians", 20, seed=1)
        path = tmp_path / "d.csv"
        save_csv(ds, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(DataFormatError):
            load_csv(path)
        # whole rows missing but newline-terminated
        path.write_text("\n".join(text.split("\n")[:10]) + "\n")
        with pytest.raises(DataFormatError, match="promises 20 rows"):
            load_csv(path)

    def test_malformed_row_reports_line(self, tmp_path):
        ds = generate("two_gaussians", 5, seed=1)
        path = tmp_path / "d.csv"
        save_csv(ds, path)
        lines = path.read_text().split("\n")
        lines[4] = "1.0,abc,0"
        path.write_text("\n".join(lines))
        with pytest.raises(DataFormatError) as info:
            load_csv(path)
        assert info.value.line == 5

    @pytest.mark.parametrize("first", ["kind=two_gaussians", "# kind=blobs, seed=0, n=0"])
    def test_bad_header(self, tmp_path, first):
        path = tmp_path / "d.csv"
        path.write_text(first + "\nx0,x1,label\n")
        with pytest.raises(DataFormatError) as info:
            load_csv(path)
        assert info.value.line == 1


class TestSplitPersistence:
    def test_round_trip(self, tmp_path, pool):
        pu = make_pu_split(pool, 300, 30, 30, 300, seed=2)
        save_pu_split(pu, tmp_path / "split")
        assert sorted(p.name for p in (tmp_path / "split").iterdir()) == ["S.csv", "U.csv", "manifest.json", "test.csv"]
        back = load_pu_split(tmp_path / "split")
        for name in ("U", "S", "test_normal", "u_index", "s_index", "test_index", "u_hidden_labels"):
            np.testing.assert_array_equal(getattr(back, name), getattr(pu, name))
        assert back.provenance == json.loads(json.dumps(pu.provenance))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_pu_split(tmp_path)
