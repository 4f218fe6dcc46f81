
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gifdlab.bench import (CSV_COLUMNS, PSNR_CAP, align_by_mse, emit_report, evaluate, mse, paired_compare, psnr,
                           read_csv, rows_to_csv, sign_test_p, ssim, to_uint8)


def test_mse_and_psnr_scalars():
    a = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    b = torch.full((1, 3, 16, 16), 0.1, dtype=torch.float64)
    assert mse(a, b) == pytest.approx(0.01)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP
    assert evaluate(a, a).psnr_capped
    with pytest.raises(ValueError):
        mse(a, torch.zeros(1, 3, 16, 15))


def test_ssim_identity_and_window_errors():
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert ssim(x, x) == pytest.approx(1.0)
    assert ssim(x, x, window="uniform") == pytest.approx(1.0)
    assert ssim(x, 1 - x) < 0.5
    with pytest.raises(ValueError):
        ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8))
    with pytest.raises(ValueError):
        ssim(x, x, window="box")


def test_ssim_matches_single_window_formula():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (1, 1, 8, 8))
    b = rng.uniform(0, 1, (1, 1, 8, 8))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - ma) * (b - mb)).mean()
    ref = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    assert ssim(a, b, window="uniform") == pytest.approx(ref, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_metric_ranges(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(1, 3, 12, 12, generator=g), torch.rand(1, 3, 12, 12, generator=g)
    assert -1 <= ssim(a, b) <= 1
    assert mse(a, b) == pytest.approx(mse(b, a))
    assert psnr(a, b) > 0


def test_alignment_recovers_permutation():
    g = torch.Generator().manual_seed(2)
    truth = torch.rand(5, 3, 16, 16, generator=g)
    perm = [3, 0, 4, 1, 2]
    recon = truth[perm] + 0.01 * torch.randn(5, 3, 16, 16, generator=g)
    aligned = align_by_mse(recon, truth)
    assert np.allclose(aligned, recon.numpy()[np.argsort(perm)])
    assert evaluate(recon, truth).psnr > evaluate(recon, truth, align=False).psnr


def test_sign_test_and_paired_compare():
    assert sign_test_p(9, 1) == pytest.approx(22 / 1024)
    assert sign_test_p(0, 0) == 1.0
    assert sign_test_p(5, 5) == 1.0
    a = [{"psnr": 20.0 + i, "ssim": 0.5, "mse": 0.01} for i in range(10)]
    b = [{"psnr": 19.0 + i, "ssim": 0.5, "mse": 0.02} for i in range(10)]
    b[0]["psnr"] = 25.0
    out = paired_compare(a, b)
    assert out["psnr"]["wins"] == 9 and out["psnr"]["losses"] == 1
    assert out["psnr"]["win_rate"] == pytest.approx(0.9)
    assert out["ssim"]["ties"] == 10 and out["ssim"]["win_rate"] == 0.5
    assert out["mse"]["wins"] == 10
    with pytest.raises(ValueError):
        paired_compare(a, b[:3])


def test_to_uint8_rounding():
    # exact halves round to even
    x = np.array([0.0, 0.5, 1.5, 2.5, 255.0, 300.0, -10.0]) / 255
    assert to_uint8(x).tolist() == [0, 0, 2, 2, 255, 255, 0]


def test_csv_format_and_roundtrip(tmp_path):
    rows = [{"method": "gifd", "seed": 0, "psnr": 12.3456789, "ssim": 0.5, "mse": 0.01, "lpips": None,
             "chosen_stage": "layer-2", "best_loss": 0.25, "wall_time_s": 3.2}]
    text = rows_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "gifd,0,12.345679,0.500000,0.010000,,layer-2,0.250000,3.200000"
    assert rows_to_csv(rows, include_time=False).splitlines()[1].endswith("0.250000,")
    p = tmp_path / "r.csv"
    p.write_text(text)
    back = read_csv(p)
    assert back[0]["psnr"] == pytest.approx(12.345679) and back[0]["lpips"] is None


def test_emit_report_writes_figures(tmp_path):
    from gifdlab.attacks import ReconstructionReport, StageTrace
    from gifdlab.core import ImageBatch
    from gifdlab.labels import LabelEstimate

    imgs = torch.rand(1, 3, 8, 8)
    stage = StageTrace("latent", [0.5, 0.4], [0.1, 0.05], 0.4, 1, imgs)
    rep = ReconstructionReport(ImageBatch(imgs), "latent", [stage], LabelEstimate([0], "given"), method="latent")
    paths = emit_report([{"method": "latent", "seed": 0, "psnr": 10.0, "ssim": 0.1, "mse": 0.1,
                          "chosen_stage": "latent", "best_loss": 0.4, "report": rep, "truth": imgs}], tmp_path)
    assert paths["csv"].exists() and paths["grid"].exists()
    curve = (tmp_path / "loss_000_latent_0.csv").read_text().splitlines()
    assert curve[0] == "stage,iter,loss,lr" and len(curve) == 3
