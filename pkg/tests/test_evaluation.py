import logging

import numpy as np
import pytest

from msdlab.data import MogSpec, sample_mog
from msdlab.diffusion import Denoiser, heun_sample
from msdlab.distill import Generator
from msdlab.errors import ValidationError
from msdlab.evaluation import (
    GridSpec,
    Histogram2D,
    build_teacher_reference,
    eval_bundle,
    export_csv,
    hist_l1,
    histogram2d,
    merge,
    noise_floor,
    read_histogram_csv,
    read_metric_series,
    sharded_histograms,
)
from msdlab.msd import StudentBundle, partition_consecutive
from msdlab.nn_core import Mlp
from tests.conftest import make_denoiser


class TestHistogram:
    def test_bin_center(self):
        h = histogram2d(np.array([[1.5, 2.5]]), bins=4, lo=0.0, hi=4.0)
        assert h.counts[1, 2] == 1 and h.counts.sum() == 1

    def test_edges(self):
        h = histogram2d(np.array([[0.0, 0.0], [4.0, 4.0]]), bins=4, lo=0.0, hi=4.0)
        assert h.counts[0, 0] == 1
        assert h.counts[3, 3] == 1

    def test_out_of_range_counted(self):
        pts = np.array([[-0.1, 1.0], [5.0, 1.0], [np.nan, 1.0], [1.0, 1.0]])
        h = histogram2d(pts, bins=4, lo=0.0, hi=4.0)
        assert (h.out_of_range, h.total_samples, int(h.counts.sum())) == (3, 4, 1)

    def test_conservation(self, rng):
        x = rng.normal(0.0, 0.5, size=(5000, 2))
        h = histogram2d(x)
        assert int(h.counts.sum()) + h.out_of_range == 5000
        assert h.counts.dtype == np.int64

    def test_uniform_fill(self):
        x = np.random.default_rng(0).uniform(-0.75, 0.75, size=(100_000, 2))
        h = histogram2d(x, bins=10)
        expected = 100_000 / 100
        assert np.all(np.abs(h.counts - expected) < 5 * np.sqrt(expected))

    @pytest.mark.parametrize("kwargs", [{"bins": 0}, {"lo": 1.0, "hi": 1.0}])
    def test_invalid_grid(self, kwargs):
        with pytest.raises(ValidationError):
            histogram2d(np.zeros((1, 2)), **kwargs)

    def test_inconsistent_totals_rejected(self):
        with pytest.raises(ValidationError):
            Histogram2D(2, 0.0, 1.0, np.ones((2, 2), dtype=np.int64), 3)

    def test_merge_adds_counts(self, rng):
        a = histogram2d(rng.normal(size=(100, 2)), bins=8, lo=-1, hi=1)
        b = histogram2d(rng.normal(size=(50, 2)), bins=8, lo=-1, hi=1)
        m = merge(a, b)
        assert m.total_samples == 150
        np.testing.assert_array_equal(m.counts, a.counts + b.counts)


class TestL1:
    def hist(self, rng, n=1000):
        return histogram2d(rng.normal(0.0, 0.3, size=(n, 2)), bins=16)

    def test_identity_and_symmetry(self, rng):
        a, b = self.hist(rng), self.hist(rng)
        assert hist_l1(a, a) == 0.0
        assert hist_l1(a, b) == hist_l1(b, a)

    def test_triangle_inequality(self, rng):
        a, b, c = self.hist(rng), self.hist(rng), self.hist(rng)
        assert hist_l1(a, c) <= hist_l1(a, b) + hist_l1(b, c) + 1e-12

    def test_raw_count_difference(self):
        a = histogram2d(np.array([[0.1, 0.1]]), bins=2, lo=0.0, hi=1.0)
        b = histogram2d(np.array([[0.9, 0.9]]), bins=2, lo=0.0, hi=1.0)
        assert hist_l1(a, b) == pytest.approx(0.5)

    def test_grid_mismatch(self, rng):
        with pytest.raises(ValidationError, match="grids differ"):
            hist_l1(self.hist(rng), histogram2d(np.zeros((1, 2)), bins=8))

    def test_unequal_totals_compared_as_densities(self, rng, caplog):
        a = histogram2d(np.array([[0.1, 0.1]]), bins=2, lo=0.0, hi=1.0)
        b = histogram2d(np.array([[0.1, 0.1], [0.1, 0.1]]), bins=2, lo=0.0, hi=1.0)
        with caplog.at_level(logging.WARNING, logger="msdlab.evaluation"):
            assert hist_l1(a, b) == 0.0
        assert "densities" in caplog.text


class TestCsv:
    def test_single_bin_file(self, tmp_path):
        path = tmp_path / "h.csv"
        export_csv(histogram2d(np.array([[0.5, 0.5]] * 3), bins=1, lo=0.0, hi=1.0), path)
        assert path.read_text() == "x_index,y_index,count\n0,0,3\n"

    def test_histogram_round_trip(self, tmp_path, rng):
        h = histogram2d(rng.normal(0.0, 0.3, size=(2000, 2)), bins=12)
        export_csv(h, tmp_path / "h.csv")
        back = read_histogram_csv(tmp_path / "h.csv")
        np.testing.assert_array_equal(back.counts, h.counts)
        assert back.bins == 12

    def test_out_of_range_restored_when_given(self, tmp_path):
        h = histogram2d(np.array([[0.1, 0.1], [5.0, 0.0], [0.2, -0.3]]), bins=4)
        export_csv(h, tmp_path / "h.csv")
        assert read_histogram_csv(tmp_path / "h.csv").total_samples == 2
        back = read_histogram_csv(tmp_path / "h.csv", out_of_range=h.out_of_range)
        assert (back.total_samples, back.out_of_range) == (3, 1)

    def test_metric_series(self, tmp_path):
        export_csv([(100, 0.5), (200, 0.25)], tmp_path / "m.csv")
        df = read_metric_series(tmp_path / "m.csv")
        assert list(df.columns) == ["step", "metric"]
        assert df["step"].tolist() == [100, 200]
        assert df["metric"].tolist() == [0.5, 0.25]

    def test_not_a_histogram(self, tmp_path):
        export_csv([(1, 0.1)], tmp_path / "m.csv")
        with pytest.raises(ValidationError):
            read_histogram_csv(tmp_path / "m.csv")


SPEC = MogSpec()
GRID = GridSpec(bins=50)


def mog_draw(rng, n):
    return sample_mog(SPEC, n, rng)


def zero_bundles(k):
    """Students that map every latent to the origin."""
    partition = partition_consecutive(8, k)
    teacher = make_denoiser(num_classes=8)
    return [
        StudentBundle(i, partition, Generator(Mlp.zeros([10, 4, 2]), 8), teacher) for i in range(k)
    ]


class TestEval:
    def test_sharding_is_schedule_independent(self):
        a = sharded_histograms(mog_draw, 10_000, 3, GRID, shards=4)
        b = sharded_histograms(mog_draw, 10_000, 3, GRID, shards=4)
        np.testing.assert_array_equal(a.collective.counts, b.collective.counts)
        assert a.collective.total_samples == 10_000

    def test_per_student_histograms_partition_the_samples(self):
        partition = partition_consecutive(8, 4)
        h = sharded_histograms(mog_draw, 5000, 0, GRID, partition, shards=3)
        assert sorted(h.per_student) == [0, 1, 2, 3]
        assert sum(p.total_samples for p in h.per_student.values()) == 5000

    def test_collapsed_students_far_above_noise_floor(self):
        partition = partition_consecutive(8, 4)
        reference = sharded_histograms(mog_draw, 20_000, 0, GRID, partition)
        floor = hist_l1(reference.collective, sharded_histograms(mog_draw, 20_000, 1, GRID).collective)
        report = eval_bundle(zero_bundles(4), reference, n_samples=20_000, seed=2)
        assert report.l1 > 5 * floor
        assert sorted(report.per_student) == [0, 1, 2, 3]
        assert report.summary_line().startswith("students=4 l1=")

    def test_reproducible_for_seed(self):
        reference = sharded_histograms(mog_draw, 2000, 0, GRID, partition_consecutive(8, 2))
        bundles = zero_bundles(2)
        a = eval_bundle(bundles, reference, n_samples=2000, seed=5, shards=2)
        b = eval_bundle(bundles, reference, n_samples=2000, seed=5, shards=2)
        assert a.l1 == b.l1 and a.per_student == b.per_student

    def test_teacher_reference_and_noise_floor(self):
        teacher = make_denoiser(num_classes=3)
        grid = GridSpec(bins=20, lo=-10.0, hi=10.0)
        ref = build_teacher_reference(teacher, 500, 0, steps=4, grid=grid, partition=partition_consecutive(3, 3))
        assert ref.collective.total_samples == 500
        assert noise_floor(teacher, 500, (0, 0), steps=4, grid=grid) == 0.0
        assert noise_floor(teacher, 500, (0, 1), steps=4, grid=grid) > 0.0


def affine_teacher(num_classes=4):
    """Denoiser whose network ignores x and sigma, so sampling is affine in z per class."""
    net = Mlp.zeros([2 + num_classes + 16, 2])
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    net.weights[0][:, 2 : 2 + num_classes] = np.stack([np.cos(angles), np.sin(angles)])
    return Denoiser(net, num_classes=num_classes)


def replay_generator(teacher, steps):
    """Single linear layer reproducing heun_sample(teacher, z, c, steps, final_euler=True)."""
    c = teacher.num_classes
    net = Mlp.zeros([2 + c, 2])
    for label in range(c):
        base = heun_sample(teacher, np.zeros((1, 2)), label, steps, final_euler=True)[0]
        net.weights[0][:, 2 + label] = base
        if label == 0:
            unit = heun_sample(teacher, np.eye(2), label, steps, final_euler=True) - base
            net.weights[0][:, :2] = unit.T
    return Generator(net, c)


class TestReplayingStudents:
    STEPS = 8
    N = 4000
    GRID = GridSpec(bins=10, lo=-2.0, hi=2.0)

    def bundles(self, teacher, partition):
        g = replay_generator(teacher, self.STEPS)
        return [StudentBundle(k, partition, g.copy(), teacher) for k in range(partition.num_students)]

    @pytest.mark.parametrize("shards", [1, 3])
    def test_same_stream_matches_reference(self, shards):
        teacher = affine_teacher()
        partition = partition_consecutive(4, 2)
        ref = build_teacher_reference(teacher, self.N, 11, steps=self.STEPS, grid=self.GRID,
                                      partition=partition, shards=shards)
        report = eval_bundle(self.bundles(teacher, partition), ref, self.N, seed=11, shards=shards)
        assert report.l1 < 1e-3
        assert all(v < 1e-3 for v in report.per_student.values())

    def test_independent_stream_sits_at_noise_floor(self):
        teacher = affine_teacher()
        partition = partition_consecutive(4, 4)
        ref = build_teacher_reference(teacher, self.N, 11, steps=self.STEPS, grid=self.GRID, partition=partition)
        report = eval_bundle(self.bundles(teacher, partition), ref, self.N, seed=12)
        floor = noise_floor(teacher, self.N, (11, 12), steps=self.STEPS, grid=self.GRID)
        assert floor > 0.0
        assert report.l1 == pytest.approx(floor, rel=0.05, abs=1e-3)
