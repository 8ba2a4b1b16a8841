"""Report figures written next to the CLI's JSON/CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .error_model import BiasMap, NoiseModel  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_eval_curves(buckets, path, title: str = ""):
    """RMS error per distance bucket, raw against calibrated, in centimetres."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        d = [b.nominal_distance for b in buckets]
        ax.plot(d, [100 * b.rms_raw for b in buckets], "o-", label="raw")
        ax.plot(d, [100 * b.rms_calibrated for b in buckets], "s-", label="calibrated")
        ax.set_xlabel("distance [m]")
        ax.set_ylabel("RMSE [cm]")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_noise_model(noise: NoiseModel, bins: list[dict], path):
    """Per-bin sigma samples with the fitted quadratic."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        used = [b for b in bins if b.get("used")]
        dropped = [b for b in bins if not b.get("used") and b.get("sigma_uncorrected")]
        if used:
            ax.plot([b["center"] for b in used], [1000 * b["sigma"] for b in used], "o", label="bin samples")
        if dropped:
            ax.plot(
                [b["center"] for b in dropped],
                [1000 * b["sigma_uncorrected"] for b in dropped],
                "x",
                color="0.6",
                label="dropped bins",
            )
        centers = [b["center"] for b in bins]
        z = np.linspace(min(centers), max(centers), 200)
        ax.plot(z, 1000 * noise(z), "-", label="fit")
        ax.set_xlabel("measured depth [m]")
        ax.set_ylabel("sigma [mm]")
        ax.legend()
        return _save(fig, path)


def plot_bias_map(bias_map: BiasMap, path, depth: float = 2.0):
    """Bias mean of every pixel at ``depth``, invalid pixels blank."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        mu = np.ma.masked_where(~bias_map.valid, 1000 * bias_map.evaluate(depth))
        im = ax.imshow(mu, cmap="coolwarm")
        ax.set_title(f"bias at {depth:g} m [mm]")
        ax.grid(False)
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)
