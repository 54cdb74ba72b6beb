"""File-only figures for the CLI reports (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_resolvent_checks(rows_by_case: dict, path: Path) -> Path:
    """Measured-over-bound ratio per check against lambda, one panel per grid case."""
    cases = list(rows_by_case)
    fig, axes = plt.subplots(1, len(cases), figsize=(4.2 * len(cases), 3.4), squeeze=False)
    for ax, case in zip(axes[0], cases):
        by_check: dict[str, list] = {}
        for row in rows_by_case[case]:
            by_check.setdefault(row.check, []).append(row)
        for name, rows in sorted(by_check.items()):
            lam = [max(r.lam, 0.1) for r in rows]
            ratio = [abs(r.measured) / r.bound if r.bound else 0.0 for r in rows]
            ax.semilogx(lam, np.maximum(ratio, 1e-18), marker="o", ms=3, lw=1, label=name)
        ax.set_yscale("log")
        ax.axhline(1.0, color="k", lw=0.8, ls="--")
        ax.set_title(case, fontsize=9)
        ax.set_xlabel("lambda (0 drawn at 0.1)")
        ax.set_ylabel("|measured| / bound")
    axes[0][-1].legend(fontsize=6, loc="lower left")
    return _save(fig, path)


def plot_refinement(series: dict, path: Path, ylabel: str = "mean |residual(T)|") -> Path:
    """Log-log statistic against dt with 3-stderr bars; ``series`` maps label to rows."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for label, rows in series.items():
        dt = np.array([r.dt for r in rows])
        y = np.array([r.mean_abs_residual if hasattr(r, "mean_abs_residual") else r.mean_plus2 for r in rows])
        se = np.array([r.stderr for r in rows])
        ax.errorbar(dt, np.maximum(y, 1e-300), yerr=3 * se, marker="o", capsize=3, label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("dt")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_lifting(rows, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    n = [r.n for r in rows]
    ax.loglog(n, [r.sup_error for r in rows], "o-", label="sup_t ||S_n u - u||_H")
    if all(np.isfinite(r.bound) for r in rows):
        ax.loglog(n, [r.bound for r in rows], "s--", label="spectral bound")
    ax.set_xlabel("n")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_gronwall(report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.plot(report.times, report.weighted, lw=1, label="E ||u+||^2 exp(-int K)")
    ax.fill_between(report.times, report.weighted - 3 * report.stderr,
                    report.weighted + 3 * report.stderr, alpha=0.3, label="3 stderr")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_paths(times, norms, path: Path, max_paths: int = 20) -> Path:
    """``||u_t||_H`` for the first ``max_paths`` paths; ``norms`` is ``(M + 1, P)``."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.plot(times, norms[:, :max_paths], lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("||u_t||_H")
    return _save(fig, path)
