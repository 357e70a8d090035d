"""Matplotlib figures written next to the CSV outputs.

Figures are convenience views; the CSV/PGM files are the primary results.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def training_curve(history, path, title="training"):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [-h["train_loss"] for h in history], label="train (−loss)")
    ax.plot(ep, [h["val_sumrate"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("sum rate [bits/channel use]")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def sum_rate_bars(rows, path):
    """Grouped bars: one group per (domain, K), one bar per scheme."""
    groups = sorted({(r["domain"], r["K"]) for r in rows})
    schemes = list(dict.fromkeys(r["scheme"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / len(schemes)
    for j, s in enumerate(schemes):
        vals, lo, hi = [], [], []
        for g in groups:
            r = next(r for r in rows if (r["domain"], r["K"]) == g and r["scheme"] == s)
            vals.append(r["sum_rate"])
            lo.append(r["sum_rate"] - r["min"])
            hi.append(r["max"] - r["sum_rate"])
        ax.bar(np.arange(len(groups)) + j * width, vals, width, yerr=[lo, hi], label=s, capsize=2)
    ax.set_xticks(np.arange(len(groups)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{d}\nK={k}" for d, k in groups])
    ax.set_ylabel("sum rate [bits/channel use]")
    ax.legend(ncol=3)
    _save(fig, path)


def delta_map(grid, mask, path):
    xs = sorted({c["x"] for c in grid})
    ys = sorted({c["y"] for c in grid})
    img = np.full((len(ys), len(xs)), np.nan)
    for c in grid:
        img[ys.index(c["y"]), xs.index(c["x"])] = c["mean_delta"]
    fig, ax = plt.subplots(figsize=(3.2, 5))
    step = xs[1] - xs[0] if len(xs) > 1 else 1.0
    extent = [xs[0] - step / 2, xs[-1] + step / 2, ys[0] - step / 2, ys[-1] + step / 2]
    im = ax.imshow(img, origin="lower", extent=extent, cmap="magma")
    (mx0, mx1), (my0, my1) = mask
    ax.add_patch(plt.Rectangle((mx0, my0), mx1 - mx0, my1 - my0, fill=False, ec="c", ls="--", lw=1.2))
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.colorbar(im, ax=ax, label=r"$\Delta$ = R$_{MRT}$ − R$_{GNN}$")
    _save(fig, path)


def sample_efficiency(summary, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    n = [r["n_train"] for r in summary]
    for region, color in (("interp", "C0"), ("extrap", "C3")):
        ax.plot(n, [r[f"{region}_mean"] for r in summary], "o-", color=color, label=region)
        ax.fill_between(n, [r[f"{region}_min"] for r in summary], [r[f"{region}_max"] for r in summary],
                        color=color, alpha=0.2)
    ax.set_xscale("log")
    ax.set_xlabel(r"$N_{train}$")
    ax.set_ylabel("GNN / MRT sum-rate ratio")
    ax.legend()
    _save(fig, path)


def power_heatmaps(result, path):
    grids = result["grids"]
    schemes = list(dict.fromkeys(s for s, _ in grids))
    Ms = sorted({m for _, m in grids})
    xs, ys = result["xs"], result["ys"]
    fig, axes = plt.subplots(len(schemes), len(Ms), figsize=(1.8 * len(Ms), 3.0 * len(schemes)),
                             squeeze=False)
    vmax = max(10 * np.log10(g.max()) for g in grids.values())
    iy, ix = result["ue_index"]
    for r, s in enumerate(schemes):
        for c, m in enumerate(Ms):
            ax = axes[r, c]
            g = 10 * np.log10(grids[(s, m)])
            ax.imshow(g, origin="lower", extent=[xs[0], xs[-1], ys[0], ys[-1]], vmin=vmax - 40, vmax=vmax,
                      cmap="viridis")
            ax.plot(xs[ix], ys[iy], "r+", ms=6)
            ax.set_title(f"{s.upper()}, M={m}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    _save(fig, path)
