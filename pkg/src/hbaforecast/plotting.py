"""Diagnostic figures written to files (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across reruns
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_traces(chain, path, label: str = "") -> Path:
    """Trace plots of m, q, theta1 and sigma2_eta over kept draws."""
    fig, axes = plt.subplots(4, 1, figsize=(8, 8), sharex=True)
    for ax, (name, v) in zip(axes, (("m", chain.m), ("q", chain.q), ("theta1", chain.theta1),
                                    ("sigma2_eta", chain.sigma2))):
        ax.plot(np.arange(v.size), v, lw=0.6)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("kept draw")
    axes[0].set_title(f"{label} traces".strip())
    fig.tight_layout()
    return _save(fig, path)


def plot_posteriors(chain, path, label: str = "") -> Path:
    """Histograms of the discrete parameters q and m."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, (name, v) in zip(axes, (("q", chain.q), ("m", chain.m))):
        vals, counts = np.unique(v, return_counts=True)
        ax.bar(vals, counts / max(v.size, 1), width=0.8)
        ax.set_xlabel(name)
        ax.set_ylabel("posterior frequency")
    fig.suptitle(f"{label} posterior of q and m".strip())
    fig.tight_layout()
    return _save(fig, path)


def plot_nmf_loss(fac, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(np.maximum(np.asarray(fac.loss_trace, dtype=float), 1e-300))
    ax.set_xlabel("iteration")
    ax.set_ylabel("squared error")
    fig.tight_layout()
    return _save(fig, path)


def plot_forecast(result, observed, path, title: str = "") -> Path:
    """Observed vs predicted counts per site with 95% bands."""
    obs = np.asarray(observed, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 5))
    err = np.vstack([result.mean - result.lower, result.upper - result.mean])
    ax.errorbar(obs, result.mean, yerr=np.maximum(err, 0), fmt="o", ms=3, lw=0.6, alpha=0.8)
    hi = float(max(obs.max(), result.upper.max(), 1.0))
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlabel("observed")
    ax.set_ylabel("predicted")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
