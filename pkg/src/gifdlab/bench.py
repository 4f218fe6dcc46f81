"""Image metrics, paired statistics and report emission."""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

PSNR_CAP = 100.0
CSV_COLUMNS = ("method", "seed", "psnr", "ssim", "mse", "lpips", "chosen_stage", "best_loss", "wall_time_s")

# optional perceptual scorer: callable(recon [B,C,H,W], truth [B,C,H,W]) -> float
_LPIPS_HOOK: Optional[Callable] = None


def register_lpips(fn: Optional[Callable]) -> None:
    global _LPIPS_HOOK
    _LPIPS_HOOK = fn


@dataclass
class MetricResult:
    psnr: float
    ssim: float
    mse: float
    lpips: Optional[float] = None
    psnr_capped: bool = False

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "mse": self.mse, "lpips": self.lpips}


def _arr(x) -> np.ndarray:
    px = getattr(x, "pixels", x)
    if isinstance(px, torch.Tensor):
        px = px.detach().cpu().numpy()
    return np.asarray(px, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float):
    if m == 0:
        return PSNR_CAP, True
    return min(10 * math.log10(1.0 / m), PSNR_CAP), False


def psnr(a, b) -> float:
    """10 log10(1 / mse) for unit range; identical inputs give the 100 dB cap."""
    return psnr_from_mse(mse(a, b))[0]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x: [..., H, W]; correlation with 'valid' support
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(x, w.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, w)


def ssim(a, b, window: str = "gaussian", size: Optional[int] = None, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM averaged over valid windows, channels and images.

    ``window="gaussian"`` uses an 11x11 kernel with sigma 1.5, ``"uniform"`` an 8x8 box.
    """
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    if window == "gaussian":
        size = size or 11
        w = _gaussian_window(size, sigma)
    elif window == "uniform":
        size = size or 8
        w = np.full((size, size), 1.0 / size ** 2)
    else:
        raise ValueError(f"unknown window {window!r}")
    if a.shape[-1] < size or a.shape[-2] < size:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than the {size}x{size} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a ** 2
    sbb = _filter_valid(b * b, w) - mu_b ** 2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def align_by_mse(recon, truth):
    """Reorder a reconstructed batch to best match the ground truth (Hungarian on pairwise MSE)."""
    r, t = _arr(recon), _arr(truth)
    if r.shape[0] == 1:
        return r
    from scipy.optimize import linear_sum_assignment

    cost = ((t[:, None] - r[None]) ** 2).reshape(t.shape[0], r.shape[0], -1).mean(-1)
    _, cols = linear_sum_assignment(cost)
    return r[cols]


def evaluate(recon, truth, align: bool = True) -> MetricResult:
    r = align_by_mse(recon, truth) if align else _arr(recon)
    t = _arr(truth)
    m = mse(r, t)
    p, capped = psnr_from_mse(m)
    lp = float(_LPIPS_HOOK(torch.from_numpy(r).float(), torch.from_numpy(t).float())) if _LPIPS_HOOK else None
    return MetricResult(psnr=p, ssim=ssim(r, t), mse=m, lpips=lp, psnr_capped=capped)


# ---------------------------------------------------------------------------
# paired comparison


def sign_test_p(wins: int, losses: int) -> float:
    """Two-sided exact sign test (ties already dropped)."""
    n = wins + losses
    if n == 0:
        return 1.0
    k = max(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k, n + 1)) / 2 ** n
    return min(1.0, 2 * tail)


def paired_compare(a: Sequence[Dict[str, float]], b: Sequence[Dict[str, float]],
                   metrics=("psnr", "ssim", "mse"), higher_is_better=None) -> Dict[str, dict]:
    """Per-metric means, win rate of A over B (ties count half) and sign-test p."""
    if len(a) != len(b):
        raise ValueError(f"paired lists differ in length: {len(a)} vs {len(b)}")
    higher_is_better = higher_is_better or {"psnr": True, "ssim": True, "mse": False, "lpips": False}
    out = {}
    for m in metrics:
        xa = np.array([r[m] for r in a], dtype=np.float64)
        xb = np.array([r[m] for r in b], dtype=np.float64)
        diff = xa - xb if higher_is_better.get(m, True) else xb - xa
        wins = int((diff > 0).sum())
        losses = int((diff < 0).sum())
        ties = len(diff) - wins - losses
        n = len(diff)
        out[m] = {
            "mean_a": float(xa.mean()) if n else float("nan"),
            "mean_b": float(xb.mean()) if n else float("nan"),
            "wins": wins, "losses": losses, "ties": ties,
            "win_rate": (wins + 0.5 * ties) / n if n else 0.5,
            "p_value": sign_test_p(wins, losses),
        }
    return out


# ---------------------------------------------------------------------------
# report emission


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def result_row(method: str, seed, report, metrics: MetricResult) -> dict:
    return {
        "method": method,
        "seed": seed,
        "psnr": metrics.psnr,
        "ssim": metrics.ssim,
        "mse": metrics.mse,
        "lpips": metrics.lpips,
        "chosen_stage": report.chosen_stage,
        "best_loss": report.stage(report.chosen_stage).best_loss,
        "wall_time_s": report.wall_time_s,
    }


def rows_to_csv(rows: List[dict], include_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        vals = [r.get(c) for c in CSV_COLUMNS]
        if not include_time:
            vals[-1] = None
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def read_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("psnr", "ssim", "mse", "best_loss", "wall_time_s", "lpips"):
            r[k] = float(r[k]) if r.get(k) not in (None, "") else None
    return rows


def to_uint8(pixels) -> np.ndarray:
    """[0,1] floats to 8-bit with round-half-even."""
    x = np.clip(_arr(pixels), 0, 1) * 255.0
    return np.rint(x).astype(np.uint8)


def save_png(pixels, path, ncol: Optional[int] = None) -> None:
    from PIL import Image

    x = to_uint8(pixels)
    if x.ndim == 3:
        x = x[None]
    b, c, h, w = x.shape
    ncol = ncol or b
    nrow = math.ceil(b / ncol)
    grid = np.zeros((nrow * h, ncol * w, c), dtype=np.uint8)
    for i in range(b):
        r, col = divmod(i, ncol)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = x[i].transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid[..., 0] if c == 1 else grid).save(path)


def save_loss_curves_csv(report, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "iter", "loss", "lr"])
        for st in report.stages:
            for i, (l, lr) in enumerate(zip(st.loss_curve, st.lr_curve)):
                w.writerow([st.stage_id, i, f"{l:.8f}", f"{lr:.8f}"])


def plot_loss_curves(report, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for st in report.stages:
        xs = np.arange(len(st.loss_curve)) + offset
        ax.plot(xs, st.loss_curve, label=st.stage_id, lw=1)
        offset += len(st.loss_curve)
    ax.set_xlabel("iteration")
    ax.set_ylabel("gradient matching loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(results: List[dict], out_dir, include_time: bool = True) -> Dict[str, Path]:
    """Write ``results.csv``, per-run loss curves/plots and a truth-vs-method image grid.

    Each entry of ``results`` holds the CSV row fields plus optional ``report``
    (ReconstructionReport) and ``truth`` (image tensor) for the figures.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv"}
    paths["csv"].write_text(rows_to_csv(results, include_time))
    tiles, truth_seen = [], set()
    for i, r in enumerate(results):
        rep = r.get("report")
        if rep is None:
            continue
        tag = f"{i:03d}_{r['method']}_{r['seed']}"
        save_loss_curves_csv(rep, out / f"loss_{tag}.csv")
        plot_loss_curves(rep, out / f"loss_{tag}.png")
        truth = r.get("truth")
        if truth is not None and r["seed"] not in truth_seen:
            truth_seen.add(r["seed"])
            tiles.append(_arr(truth))
        tiles.append(align_by_mse(rep.final_images, truth) if truth is not None else _arr(rep.final_images))
    if tiles:
        grid = np.concatenate(tiles, axis=0)
        save_png(grid, out / "grid.png", ncol=min(len(grid), 8))
        paths["grid"] = out / "grid.png"
    return paths
