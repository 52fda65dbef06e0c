"""Geometry/image metrics against brute-force oracles and closed forms."""
import csv
import itertools
import math

import pytest
import torch
from hypothesis import given, strategies as st

from monophys.eval import (CHAMFER_UNIT_SCALE, METRICS_COLUMNS, ParamMAE,
                           chamfer, emd, future_prediction, param_mae, psnr,
                           scale_error, ssim, summary_table,
                           write_metrics_csv)


def brute_chamfer(a: torch.Tensor, b: torch.Tensor) -> float:
    """O(n^2) double loop: half the sum of both mean min squared distances."""
    def one_way(p, q):
        total = 0.0
        for i in range(p.shape[0]):
            best = min(float(((p[i] - q[j]) ** 2).sum())
                       for j in range(q.shape[0]))
            total += best
        return total / p.shape[0]
    return 0.5 * (one_way(a, b) + one_way(b, a)) * CHAMFER_UNIT_SCALE


class TestChamfer:
    def test_matches_brute_force_on_random_64_point_clouds(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(3):
            a = torch.rand((64, 3), generator=gen, dtype=torch.float64)
            b = torch.rand((64, 3), generator=gen, dtype=torch.float64)
            assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b),
                                                  rel=1e-12)

    def test_single_point_pair_is_squared_distance(self):
        a = torch.zeros((1, 3), dtype=torch.float64)
        b = torch.tensor([[0.03, 0.0, 0.0]], dtype=torch.float64)
        assert chamfer(a, b) == pytest.approx(0.03 ** 2 * CHAMFER_UNIT_SCALE)

    def test_identical_clouds_score_zero(self):
        a = torch.rand((50, 3), generator=torch.Generator().manual_seed(0),
                       dtype=torch.float64)
        assert chamfer(a, a.clone()) == 0.0

    def test_symmetry_exact(self):
        gen = torch.Generator().manual_seed(11)
        a = torch.rand((40, 3), generator=gen, dtype=torch.float64)
        b = torch.rand((23, 3), generator=gen, dtype=torch.float64)
        assert chamfer(a, b) == chamfer(b, a)

    def test_zero_iff_clouds_coincide(self):
        a = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
                         dtype=torch.float64)
        b = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                          [1.0, 0.0, 0.0]], dtype=torch.float64)
        assert chamfer(a, b) == 0.0            # every point has a twin
        b2 = b.clone()
        b2[2, 0] = 2.0                          # now one point is unmatched
        assert chamfer(a, b2) > 0.0

    def test_chunked_path_equals_unchunked(self):
        gen = torch.Generator().manual_seed(3)
        a = torch.rand((300, 3), generator=gen, dtype=torch.float64)
        b = torch.rand((257, 3), generator=gen, dtype=torch.float64)
        assert chamfer(a, b, chunk=64) == pytest.approx(chamfer(a, b),
                                                        rel=1e-14)


def brute_emd(a: torch.Tensor, b: torch.Tensor) -> float:
    """Exact balanced OT cost by enumerating assignments (n <= 6)."""
    n = a.shape[0]
    C = torch.cdist(a, b) ** 2
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = float(sum(C[i, perm[i]] for i in range(n))) / n
        best = min(best, cost)
    return best


class TestEMD:
    def test_identical_clouds_score_zero(self):
        gen = torch.Generator().manual_seed(5)
        a = torch.rand((30, 3), generator=gen, dtype=torch.float64)
        assert emd(a, a.clone()) == 0.0

    @pytest.mark.parametrize("d", [0.02, 0.05])
    def test_translation_costs_d_squared(self, d):
        gen = torch.Generator().manual_seed(9)
        a = torch.rand((60, 3), generator=gen, dtype=torch.float64) * 0.2
        b = a + torch.tensor([d, 0.0, 0.0], dtype=torch.float64)
        assert emd(a, b) == pytest.approx(d * d, rel=0.02)

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_small_instances_match_assignment_enumeration(self, n):
        gen = torch.Generator().manual_seed(n)
        a = torch.rand((n, 3), generator=gen, dtype=torch.float64)
        b = torch.rand((n, 3), generator=gen, dtype=torch.float64)
        assert emd(a, b) == pytest.approx(brute_emd(a, b), rel=0.01)

    def test_nonnegative_and_permutation_invariant(self):
        gen = torch.Generator().manual_seed(21)
        a = torch.rand((40, 3), generator=gen, dtype=torch.float64)
        b = torch.rand((40, 3), generator=gen, dtype=torch.float64)
        v = emd(a, b)
        assert v >= 0.0
        perm = torch.randperm(40, generator=gen)
        assert emd(a[perm], b, seed=0) == pytest.approx(emd(a, b, seed=0),
                                                        rel=1e-6)

    def test_subsampling_is_seeded_and_reproducible(self):
        gen = torch.Generator().manual_seed(2)
        a = torch.rand((700, 3), generator=gen, dtype=torch.float64)
        b = torch.rand((650, 3), generator=gen, dtype=torch.float64)
        assert emd(a, b, seed=123) == emd(a, b, seed=123)


class TestImageMetrics:
    def test_identical_images_hit_the_cap(self):
        img = torch.rand((32, 32, 3), generator=torch.Generator().manual_seed(1),
                         dtype=torch.float64)
        assert psnr(img, img.clone()) == 99.0
        assert ssim(img, img.clone()) == pytest.approx(1.0, abs=1e-12)

    def test_mse_001_is_20db(self):
        a = torch.zeros((16, 16, 3), dtype=torch.float64)
        b = torch.full_like(a, 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_constant_offset_ssim_closed_form(self):
        # For constant images only the luminance term differs:
        # SSIM = (2*mu_a*mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
        a = torch.full((24, 24, 3), 0.3, dtype=torch.float64)
        b = torch.full((24, 24, 3), 0.4, dtype=torch.float64)
        c1 = 0.01 ** 2
        want = (2 * 0.3 * 0.4 + c1) / (0.3 ** 2 + 0.4 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch_rejected(self):
        a = torch.zeros((8, 8, 3), dtype=torch.float64)
        b = torch.zeros((8, 9, 3), dtype=torch.float64)
        with pytest.raises(ValueError):
            psnr(a, b)


class TestParamMAE:
    GT = {"E": 2.0e4, "nu": 0.3, "v0": [0.1, -0.2, -0.5], "sigma_y": 300.0}

    def test_fit_equals_gt_gives_all_zero(self):
        mae = param_mae(dict(self.GT), dict(self.GT))
        assert mae.v0 == 0.0
        assert mae.log10_E == 0.0
        assert mae.nu == 0.0
        assert mae.log10_sigma_y == 0.0

    def test_tenfold_E_gives_one_dex(self):
        fit = dict(self.GT, E=self.GT["E"] * 10)
        assert param_mae(fit, self.GT).log10_E == pytest.approx(1.0)

    def test_nu_offset_passes_through(self):
        fit = dict(self.GT, nu=self.GT["nu"] + 0.05)
        assert param_mae(fit, self.GT).nu == pytest.approx(0.05)

    def test_v0_is_componentwise_mean(self):
        fit = dict(self.GT, v0=[0.1 + 0.3, -0.2, -0.5])
        assert param_mae(fit, self.GT).v0 == pytest.approx(0.1)

    def test_sigma_y_requires_both_sides(self):
        fit = {k: v for k, v in self.GT.items() if k != "sigma_y"}
        assert param_mae(fit, self.GT).log10_sigma_y is None

    def test_invariant_to_encode_decode_roundtrip(self):
        from monophys.scene_model import (MaterialModel, MaterialParams,
                                          decode_params, encode_params)
        mat = MaterialParams(model=MaterialModel.Plasticine, E=5.3e4,
                             nu=0.27, sigma_y=740.0)
        raw = encode_params(mat, (0.1, 0.2, -0.4), 1.1)
        mat2, v02, _ = decode_params(raw)
        fit = {"E": float(mat2.E), "nu": float(mat2.nu),
               "v0": [float(v) for v in v02],
               "sigma_y": float(mat2.sigma_y)}
        gt = {"E": 5.3e4, "nu": 0.27, "v0": [0.1, 0.2, -0.4],
              "sigma_y": 740.0}
        mae = param_mae(fit, gt)
        assert mae.log10_E == pytest.approx(0.0, abs=1e-12)
        assert mae.nu == pytest.approx(0.0, abs=1e-12)
        assert mae.v0 == pytest.approx(0.0, abs=1e-12)
        assert mae.log10_sigma_y == pytest.approx(0.0, abs=1e-12)


class TestScaleError:
    def test_log_ratio(self):
        assert scale_error(1.1, 1.0) == pytest.approx(math.log(1.1))
        assert scale_error(1.0, 1.1) == pytest.approx(math.log(1.1))
        assert scale_error(2.0, 2.0) == 0.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            scale_error(-1.0, 1.0)


class TestFuturePrediction:
    def test_row_count_matches_future_frames(self, elastic_bundle):
        n = elastic_bundle.n_frames
        t_obs = 4
        positions = [elastic_bundle.gt_pc(t)[0] for t in range(n)]
        frames = [elastic_bundle.frame(t) for t in range(n)]
        out = future_prediction(positions, frames, elastic_bundle, t_obs)
        assert len(out["rows"]) == n - t_obs
        assert out["n_future"] == n - t_obs

    def test_truth_prediction_scores_perfectly(self, elastic_bundle):
        n = elastic_bundle.n_frames
        positions = [elastic_bundle.gt_pc(t)[0] for t in range(n)]
        frames = [elastic_bundle.frame(t) for t in range(n)]
        out = future_prediction(positions, frames, elastic_bundle, n - 2)
        assert out["mean_chamfer_1e-4m2"] == 0.0
        assert out["mean_psnr_db"] == 99.0

    def test_invalid_split_rejected(self, elastic_bundle):
        with pytest.raises(ValueError):
            future_prediction([], [], elastic_bundle, 0)


class TestMetricsTable:
    ROW = {"scene": "a", "seed": 0, "config": "full", "chamfer_1e-4m2": 1.0,
           "emd_m2": 2.0, "psnr_db": 30.0, "ssim": 0.9, "mae_v0_mps": 0.1,
           "mae_log10_E": 0.2, "mae_nu": 0.01, "mae_log10_sigma_y": None,
           "scale_abs_log_error": 0.05}

    def test_csv_has_unit_flagged_header_and_nan_for_missing(self, tmp_path):
        path = tmp_path / "metrics.csv"
        row = {k: v for k, v in self.ROW.items() if v is not None}
        write_metrics_csv(path, [row])
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert set(rows[0]) == set(METRICS_COLUMNS)
        assert rows[0]["mae_log10_sigma_y"] == "nan"
        assert float(rows[0]["chamfer_1e-4m2"]) == 1.0

    def test_summary_table_groups_and_reports_mean_std(self):
        rows = [dict(self.ROW, mae_log10_sigma_y=0.3),
                dict(self.ROW, **{"chamfer_1e-4m2": 3.0,
                                  "mae_log10_sigma_y": 0.3})]
        text = summary_table(rows)
        assert "full" in text
        lines = text.splitlines()
        assert len(lines) == 3  # header, rule, one group row
