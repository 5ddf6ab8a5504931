import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radiomap.grid import (
    DB_FLOOR,
    FILL_VALUE,
    GridSpec,
    MapTensor,
    MeasurementSet,
    SampledMap,
    aggregate,
    assign_to_grid,
    combine_masks,
    neighbor_table,
    smooth_map,
    to_db,
    to_linear,
)


def brute_nearest(grid, loc):
    pts = grid.points().reshape(-1, 2)
    d2 = ((pts - loc) ** 2).sum(-1)
    return int(np.flatnonzero(d2 == d2.min())[0])


class TestGridSpec:
    def test_points(self):
        g = GridSpec(2, 3, 2.0, 5.0, origin=(1.0, -1.0))
        np.testing.assert_array_equal(g.point(1, 2), [5.0, 4.0])
        np.testing.assert_array_equal(g.points()[1, 2], g.point(1, 2))

    def test_square_spacing(self):
        g = GridSpec.square(100.0, 32)
        assert g.delta_x == pytest.approx(100 / 31)
        assert g.delta_x * g.n_x == pytest.approx(103.2258, abs=1e-4)

    @pytest.mark.parametrize("args", [(0, 3, 1, 1), (3, 3, 0, 1), (3, 3, 1, -1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            GridSpec(*args)

    def test_dict_roundtrip(self):
        g = GridSpec(3, 4, 1.5, 2.5, (1.0, 2.0))
        assert GridSpec.from_dict(g.to_dict()) == g


class TestDecibels:
    def test_floor(self):
        assert to_db(0.0) == DB_FLOOR
        assert to_db(1e-30) == DB_FLOOR
        assert to_db(1.0) == 0.0

    def test_roundtrip(self, rng):
        x = rng.uniform(-150, 30, 50)
        np.testing.assert_allclose(to_db(to_linear(x)), x, atol=1e-12)


class TestAssign:
    def test_on_grid_point(self, grid4):
        a = assign_to_grid(grid4, MeasurementSet([[0.0, 0.0]], [-50.0], [0.0]))
        assert a.sets() == {(0, 0): [0]}

    def test_tie_goes_to_row_major_first(self, grid4):
        a = assign_to_grid(grid4, MeasurementSet([[0.5, 0.0], [0.0, 0.5], [0.5, 0.5]], [0, 0, 0], [0.0]))
        assert a.flat.tolist() == [0, 0, 0]

    def test_matches_exhaustive_scan(self, grid4, rng):
        locs = rng.uniform(-1, 4, size=(10, 2))
        a = assign_to_grid(grid4, MeasurementSet(locs, np.zeros(10), [0.0]))
        assert a.flat.tolist() == [brute_nearest(grid4, l) for l in locs]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-3, 8), st.floats(-3, 8)), min_size=0, max_size=30))
    def test_partition_and_nearest(self, pts):
        g = GridSpec(3, 5, 1.25, 0.75, origin=(0.5, 0.0))
        locs = np.array(pts, dtype=float).reshape(-1, 2)
        a = assign_to_grid(g, MeasurementSet(locs, np.zeros(len(locs)), [0.0]))
        assert a.counts().sum() == len(locs)
        for n, loc in enumerate(locs):
            cell = g.points().reshape(-1, 2)[a.flat[n]]
            best = brute_nearest(g, loc)
            d_cell = ((cell - loc) ** 2).sum()
            d_best = ((g.points().reshape(-1, 2)[best] - loc) ** 2).sum()
            assert d_cell <= d_best + 1e-12


class TestAggregate:
    def test_single(self, grid4):
        s = aggregate(grid4, MeasurementSet([[1.0, 2.0]], [-60.0], [0.0]))
        assert s.values[2, 1, 0] == pytest.approx(-60.0)
        assert s.sample_mask[2, 1] == 1
        assert s.omega == {(2, 1)}

    def test_linear_mean(self, grid4):
        s = aggregate(grid4, MeasurementSet([[1.0, 1.0], [1.1, 0.9]], [-60.0, -70.0], [0.0]))
        expected = 10 * np.log10((1e-6 + 1e-7) / 2)
        assert s.values[1, 1, 0] == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(-62.596, abs=1e-3)

    def test_miss_fill(self, grid4):
        s = aggregate(grid4, MeasurementSet([[0.0, 0.0]], [-60.0], [0.0]))
        assert s.values[3, 3, 0] == FILL_VALUE == 0.0
        assert s.sample_mask[3, 3] == 0

    def test_empty(self, grid4):
        s = aggregate(grid4, MeasurementSet(np.zeros((0, 2)), np.zeros((0, 1)), [0.0]))
        assert s.n_observed == 0 and s.omega == set()

    def test_on_grid_refinement(self, grid4, rng):
        cells = rng.choice(16, 7, replace=False)
        locs = grid4.points().reshape(-1, 2)[cells]
        vals = rng.uniform(-100, -40, (7, 3))
        s = aggregate(grid4, MeasurementSet(locs, vals, [1.0, 2.0, 3.0]))
        np.testing.assert_allclose(s.values.reshape(16, 3)[cells], vals, atol=1e-12)
        mask = np.zeros(16)
        mask[cells] = 1
        np.testing.assert_array_equal(s.sample_mask.ravel(), mask)
        assert s.omega == {divmod(int(c), 4) for c in cells}

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            MeasurementSet([[0, 0]], [np.nan], [0.0])


class TestMasks:
    def test_empty_buildings(self, rng):
        m = (rng.random((4, 4)) < 0.5).astype(float)
        np.testing.assert_array_equal(combine_masks(m, []), m)

    def test_combined(self):
        m = np.array([[1, 0], [0, 0]])
        np.testing.assert_array_equal(combine_masks(m, [(1, 1)]), [[1, 0], [0, -1]])

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            combine_masks(np.array([[1, 0], [0, 0]]), [(0, 0)])

    def test_idempotent(self):
        m = np.array([[1, 0], [0, 0]])
        once = combine_masks(m, [(1, 1)])
        np.testing.assert_array_equal(combine_masks(once, [(1, 1)]), once)

    def test_sampled_map_channels(self, grid4):
        vals = np.zeros((4, 4, 1))
        mask = np.zeros((4, 4))
        mask[0, 0] = 1
        bld = np.zeros((4, 4), bool)
        bld[3, 3] = True
        s = SampledMap(grid4, vals, mask, buildings=bld, meta_masks=[np.ones((4, 4))])
        ch = s.mask_channels()
        assert ch.shape == (4, 4, 2)
        assert ch[0, 0, 0] == 1 and ch[3, 3, 0] == -1 and ch[1, 1, 0] == 0

    def test_sampled_map_overlap_rejected(self, grid4):
        mask = np.zeros((4, 4))
        mask[0, 0] = 1
        with pytest.raises(ValueError):
            SampledMap(grid4, np.zeros((4, 4)), mask, buildings=mask.astype(bool))


class TestSmooth:
    def test_identity(self, grid4, rng):
        m = MapTensor(grid4, rng.uniform(-90, -40, (4, 4, 2)), [1.0, 2.0])
        np.testing.assert_allclose(smooth_map(m, 1).values, m.values, atol=1e-12)

    def test_constant(self, grid4):
        m = MapTensor(grid4, np.full((4, 4, 1), -70.0))
        np.testing.assert_allclose(smooth_map(m, 9).values, -70.0, atol=1e-12)

    def test_interior_3x3(self, rng):
        g = GridSpec(5, 5, 1.0, 1.0)
        m = MapTensor(g, rng.uniform(-90, -40, (5, 5, 1)))
        out = smooth_map(m, 9)
        for i in range(1, 4):
            for j in range(1, 4):
                block = to_linear(m.values[i - 1 : i + 2, j - 1 : j + 2, 0])
                assert out.values[i, j, 0] == pytest.approx(to_db(block.mean()), abs=1e-12)

    def test_brute_force_table(self):
        g = GridSpec(4, 6, 1.0, 1.0)
        table = neighbor_table(g, 9)
        pts = g.points().reshape(-1, 2)
        for p in range(g.size):
            d2 = ((pts - pts[p]) ** 2).sum(-1)
            order = sorted(range(g.size), key=lambda q: (d2[q], q))[:9]
            assert table[p].tolist() == order

    def test_too_many(self, grid4):
        with pytest.raises(ValueError):
            smooth_map(MapTensor(grid4, np.zeros((4, 4))), 17)
