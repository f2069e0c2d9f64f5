"""Render exported plot-data CSVs as PNG figures next to them."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .experiment import read_csv  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
METHOD_COLORS = {"baseline": "#7f7f7f", "logitnorm": "#1f77b4", "t2fnorm": "#d62728", "feature_penalty": "#2ca02c"}


# tab20 minus the hues already used by the base methods
_EXTRA = [c for i, c in enumerate(plt.get_cmap("tab20").colors) if i not in (0, 4, 6, 14)]


def _palette(run_ids) -> dict:
    """Fixed colours for the base methods; variants take distinct colours in sorted order."""
    variants = sorted({r for r in run_ids if r not in METHOD_COLORS})
    colors = {r: _EXTRA[i % len(_EXTRA)] for i, r in enumerate(variants)}
    return {**colors, **{r: c for r, c in METHOD_COLORS.items()}}


def _epoch_axis(ax):
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))


def _save(fig, csv_path: Path) -> Path:
    out = Path(csv_path).with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def _by_run_epoch(rows, value):
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r[value] != "":
            acc[r["run_id"]][int(r["epoch"])].append(float(r[value]))
    return {run: (np.array(sorted(ep)), np.array([np.mean(ep[e]) for e in sorted(ep)])) for run, ep in acc.items()}


def _progression(csv_path, pairs, ylabel):
    rows = read_csv(csv_path)
    color = _palette(r["run_id"] for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(pairs), figsize=(5.2 * len(pairs), 3.6), squeeze=False)
        for ax, (col, title) in zip(axes[0], pairs):
            for run, (x, y) in _by_run_epoch(rows, col).items():
                ax.plot(x + 1, y, label=run, color=color[run], lw=1.5)
            ax.set_title(title)
            ax.set_xlabel("epoch")
            ax.set_ylabel(ylabel)
            _epoch_axis(ax)
        axes[0][0].legend(fontsize=7)
        return _save(fig, csv_path)


def render_separability_progression(csv_path):
    return _progression(csv_path, [("separability_feature", "feature space"), ("separability_logit", "logit space")],
                        "separability ratio")


def render_norm_progression(csv_path):
    rows = read_csv(csv_path)
    color = _palette(r["run_id"] for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10.4, 3.6))
        for ax, space in zip(axes, ("feature", "logit")):
            for col, ls in ((f"id_{space}_norm", "-"), (f"ood_{space}_norm", "--")):
                for run, (x, y) in _by_run_epoch(rows, col).items():
                    ax.plot(x + 1, y, ls, color=color[run], lw=1.3,
                            label=f"{run} {'ID' if col.startswith('id') else 'OOD'}")
            ax.set_title(f"mean {space} norm")
            ax.set_xlabel("epoch")
            _epoch_axis(ax)
        axes[0].legend(fontsize=6, ncol=2)
        return _save(fig, csv_path)


def render_msp_histogram(csv_path):
    rows = read_csv(csv_path)
    groups = defaultdict(list)
    for r in rows:
        groups[(r["run_id"], r["ood_set"])].append(r)
    runs = list(dict.fromkeys(k[0] for k in groups))
    sets = list(dict.fromkeys(k[1] for k in groups))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(sets), len(runs), figsize=(3.2 * len(runs), 2.4 * len(sets)),
                                 squeeze=False, sharex=True)
        for i, ood in enumerate(sets):
            for j, run in enumerate(runs):
                ax = axes[i][j]
                grp = groups[(run, ood)]
                lo = np.array(sorted({float(r["bin_lo"]) for r in grp}))
                width = lo[1] - lo[0] if len(lo) > 1 else 1.0
                for col, color, label in (("id_mass", "#1f77b4", "ID"), ("ood_mass", "#d62728", "OOD")):
                    mass = defaultdict(list)
                    for r in grp:
                        mass[float(r["bin_lo"])].append(float(r[col]))
                    ax.bar(lo, [np.mean(mass[b]) for b in lo], width=width, align="edge", alpha=0.5,
                           color=color, label=label)
                ax.set_title(f"{run} / {ood}", fontsize=8)
        axes[0][0].legend(fontsize=7)
        for ax in axes[-1]:
            ax.set_xlabel("MSP")
        return _save(fig, csv_path)


def render_tau_sweep(csv_path):
    rows = read_csv(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax2 = ax.twinx()
        lines = defaultdict(dict)
        acc = {}
        for r in rows:
            tau = float(r["tau"])
            lines[(r["scorer"], r["ood_set"])][tau] = 100 * float(r["fpr_at_95_mean"])
            acc[tau] = 100 * float(r["id_accuracy_mean"])
        for (scorer, ood), pts in lines.items():
            xs = sorted(pts)
            ax.plot(xs, [pts[x] for x in xs], marker="o", lw=1, label=f"FPR@95 {scorer}/{ood}")
        xs = sorted(acc)
        ax2.plot(xs, [acc[x] for x in xs], "k--", marker="s", label="accuracy")
        ax.set_xscale("log")
        ax.set_xlabel("tau")
        ax.set_ylabel("FPR@95 (%)")
        ax2.set_ylabel("accuracy (%)")
        handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
        ax.legend(handles=handles, fontsize=6, ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.15))
        return _save(fig, csv_path)


def render_dice_sweep(csv_path):
    rows = read_csv(csv_path)
    color = _palette(r["run_id"] for r in rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = defaultdict(lambda: defaultdict(list))
        for r in rows:
            pts[r["run_id"]][float(r["dice_p"])].append(100 * float(r["fpr_at_95_mean"]))
        for run, by_p in pts.items():
            xs = sorted(by_p)
            ax.plot(xs, [np.mean(by_p[x]) for x in xs], marker="o", color=color[run], label=run)
        ax.set_xlabel("sparsity p")
        ax.set_ylabel("mean FPR@95 (%)")
        ax.legend()
        return _save(fig, csv_path)


def render_fc_heatmap(csv_path):
    if Path(csv_path).name == "fc_weight_stats.csv":
        return None
    w = np.array([[float(v) for v in r.values()] for r in read_csv(csv_path)])
    lim = float(np.abs(w).max()) or 1.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 0.5 + 0.4 * w.shape[0]))
        im = ax.imshow(w, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_xlabel("feature")
        ax.set_ylabel("class")
        ax.grid(False)
        fig.colorbar(im, ax=ax)
        return _save(fig, csv_path)


def render(kind: str, csv_path):
    return globals()[f"render_{kind}"](Path(csv_path))
