"""Method comparison tables and per-figure plot-data exports from a run report."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import nn
from .experiment import fmt, read_csv, report_rows, write_csv
from .metrics import fc_weight_stats, msp_histogram
from .score import read_scores
from .train import read_traces

TABLE_METRICS = (("fpr_at_95", "FPR@95", min), ("auroc", "AUROC", max), ("aupr", "AUPR", max))
EXPORT_KINDS = ("separability_progression", "norm_progression", "msp_histogram", "tau_sweep",
                "dice_sweep", "fc_heatmap")
HIST_BINS = 20


class MissingPlotData(ValueError):
    pass


def _is_base(row: dict, methods) -> bool:
    return row["run_id"] in methods and row["normalize_at_scoring"] == "0"


def compare_methods(report: dict) -> dict:
    """Baseline/LogitNorm/T2FNorm-style table from seed-averaged metrics.

    Returns ``{"methods", "rows", "csv_rows", "text"}``; one row per
    (scorer, OOD set) plus a per-scorer mean over OOD sets. Best value per
    cell is marked with ``*`` (lowest FPR@95, highest AUROC/AUPR).
    """
    methods = list(report["config"]["methods"])
    if len(methods) < 2:
        raise ValueError("comparison needs at least two methods")
    base_scorers = {_scorer_key(s) for s in report["config"]["scorers"]}
    agg = [r for r in report_rows(report, "aggregate_csv") if _is_base(r, methods) and r["scorer"] in base_scorers]

    cells: dict = {}
    order: list = []
    for r in agg:
        k = (r["scorer"], r["ood_set"])
        if k not in cells:
            cells[k] = {}
            order.append(k)
        cells[k][r["run_id"]] = {m: float(r[f"{m}_mean"]) for m, _, _ in TABLE_METRICS}

    for scorer in dict.fromkeys(s for s, _ in order):
        sets = [k for k in order if k[0] == scorer and k[1] != "mean"]
        mean_cell = {}
        for meth in methods:
            if all(meth in cells[k] for k in sets):
                mean_cell[meth] = {m: math.fsum(cells[k][meth][m] for k in sets) / len(sets) for m, _, _ in TABLE_METRICS}
        cells[(scorer, "mean")] = mean_cell
        order.insert(max(i for i, k in enumerate(order) if k in sets) + 1, (scorer, "mean"))

    rows = []
    for scorer, ood in order:
        row = {"scorer": scorer, "ood_set": ood}
        for m, label, pick in TABLE_METRICS:
            vals = {meth: cells[(scorer, ood)][meth][m] for meth in methods if meth in cells[(scorer, ood)]}
            best = pick(vals.values()) if vals else None
            row[m] = vals
            row[f"{m}_best"] = [meth for meth, v in vals.items() if v == best]
        rows.append(row)

    header = ["scorer", "ood_set"] + [label for _, label, _ in TABLE_METRICS]
    csv_rows = []
    for row in rows:
        line = [row["scorer"], row["ood_set"]]
        for m, _, _ in TABLE_METRICS:
            line.append(" / ".join(
                fmt(row[m][meth]) + ("*" if meth in row[f"{m}_best"] else "") if meth in row[m] else "-"
                for meth in methods))
        csv_rows.append(line)

    text = _render_text(methods, rows)
    return {"methods": methods, "header": header, "rows": rows, "csv_rows": csv_rows, "text": text}


def _scorer_key(s: dict) -> str:
    from .score import ScorerSpec

    return ScorerSpec(**s).key


def _render_text(methods, rows) -> str:
    head = ["scorer", "ood_set"] + [label for _, label, _ in TABLE_METRICS]
    body = []
    for row in rows:
        line = [row["scorer"], row["ood_set"]]
        for m, _, _ in TABLE_METRICS:
            line.append(" / ".join(
                f"{100 * row[m][meth]:.1f}" + ("*" if meth in row[f"{m}_best"] else "") if meth in row[m] else "-"
                for meth in methods))
        body.append(line)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    lines = ["values in % as " + " / ".join(methods) + "; * marks the best", ""]
    for line in [head] + body:
        lines.append("  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_comparison(report: dict, out_dir=None) -> tuple:
    table = compare_methods(report)
    out = Path(out_dir or report["dir"])
    csv_path, txt_path = out / "comparison.csv", out / "comparison.txt"
    write_csv(csv_path, table["header"], table["csv_rows"])
    txt_path.write_text(table["text"])
    return csv_path, txt_path


# ----------------------------------------------------------------------
# plot data
# ----------------------------------------------------------------------
def _ok_runs(report: dict) -> list:
    return [r for r in report["runs"] if r["status"] == "ok"]


def export_plotdata(report: dict, kind: str, render: bool = True) -> list:
    """Write the CSV(s) behind one figure kind into ``<report dir>/plots``.

    With ``render`` a PNG is drawn next to each CSV. Returns the written paths.
    """
    if kind not in EXPORT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {EXPORT_KINDS}")
    root = Path(report["dir"])
    out = root / "plots"
    out.mkdir(exist_ok=True)
    paths = globals()[f"_export_{kind}"](report, root, out)
    if render:
        from . import plotting

        figs = []
        for p in paths:
            fig = plotting.render(kind, p)
            if fig is not None:
                figs.append(fig)
        paths = paths + figs
    return paths


def _trace_rows(report, root):
    for run in _ok_runs(report):
        for t in read_traces(root / run["trace"]):
            yield run, t


def _export_separability_progression(report, root, out):
    rows = []
    for run, t in _trace_rows(report, root):
        if t.separability_feature is None:
            raise MissingPlotData("traces carry no separability ratios (no monitor OOD set)")
        rows.append([run["run_id"], run["method"], run["seed"], t.epoch, t.separability_feature, t.separability_logit])
    if not rows:
        raise MissingPlotData("no completed runs")
    path = out / "separability_progression.csv"
    write_csv(path, ["run_id", "method", "seed", "epoch", "separability_feature", "separability_logit"], rows)
    return [path]


def _export_norm_progression(report, root, out):
    rows = [
        [run["run_id"], run["method"], run["seed"], t.epoch, t.id_feature_norm, t.ood_feature_norm,
         t.id_logit_norm, t.ood_logit_norm]
        for run, t in _trace_rows(report, root)
    ]
    if not rows:
        raise MissingPlotData("no completed runs")
    path = out / "norm_progression.csv"
    write_csv(path, ["run_id", "method", "seed", "epoch", "id_feature_norm", "ood_feature_norm",
                     "id_logit_norm", "ood_logit_norm"], rows)
    return [path]


def _export_msp_histogram(report, root, out):
    methods = report["config"]["methods"]
    ood_sets = sorted({r["ood_set"] for r in report_rows(report)})
    rows = []
    for run in _ok_runs(report):
        if run["run_id"] not in methods:
            continue
        run_dir = root / Path(run["trace"]).parent
        model_id = f"{run['run_id']}-s{run['seed']}"
        id_path = run_dir / f"{model_id}__msp__{report['provenance']['id_test_set']}__norm0.csv"
        if not id_path.exists():
            raise MissingPlotData("msp_histogram needs the msp scorer in the config")
        id_scores = read_scores(id_path)
        for ood in ood_sets:
            h = msp_histogram(id_scores, read_scores(run_dir / f"{model_id}__msp__{ood}__norm0.csv"), HIST_BINS)
            for i in range(HIST_BINS):
                rows.append([run["run_id"], run["method"], run["seed"], ood, h["edges"][i], h["edges"][i + 1],
                             h["id_counts"][i], h["ood_counts"][i], h["id_mass"][i], h["ood_mass"][i], h["overlap"]])
    if not rows:
        raise MissingPlotData("no method runs with msp scores")
    path = out / "msp_histogram.csv"
    write_csv(path, ["run_id", "method", "seed", "ood_set", "bin_lo", "bin_hi", "id_count", "ood_count",
                     "id_mass", "ood_mass", "overlap"], rows)
    return [path]


def _export_tau_sweep(report, root, out):
    base = nn.ModelSpec(**{**_model_defaults(report), "method": "t2fnorm"})
    runs = [r for r in _ok_runs(report) if r["method"] == "t2fnorm"
            and float(r["p_norm"]) == base.p_norm and int(r["layer"]) == base.norm_block]
    taus = sorted({float(r["tau"]) for r in runs})
    if len(taus) < 2:
        raise MissingPlotData("tau_sweep needs t2fnorm runs at two or more temperatures")
    conv = {}
    for r in runs:
        conv.setdefault(float(r["tau"]), []).append(bool(r["converged"]))
    rows = []
    for a in report_rows(report, "aggregate_csv"):
        if a["method"] != "t2fnorm" or a["normalize_at_scoring"] != "0":
            continue
        if float(a["p_norm"]) != base.p_norm or int(a["layer"]) != base.norm_block:
            continue
        tau = float(a["tau"])
        rows.append([tau, a["run_id"], a["scorer"], a["ood_set"], a["n_seeds"], a["id_accuracy_mean"],
                     a["id_accuracy_std"], a["fpr_at_95_mean"], a["fpr_at_95_std"], a["auroc_mean"],
                     a["aupr_mean"], float(np.mean(conv.get(tau, [False])))])
    rows.sort(key=lambda r: (r[0], r[2], r[3]))
    path = out / "tau_sweep.csv"
    write_csv(path, ["tau", "run_id", "scorer", "ood_set", "n_seeds", "id_accuracy_mean", "id_accuracy_std",
                     "fpr_at_95_mean", "fpr_at_95_std", "auroc_mean", "aupr_mean", "converged_fraction"], rows)
    return [path]


def _model_defaults(report) -> dict:
    cfg = report["config"]
    kw = dict(cfg["model"])
    syn = cfg["data"].get("synthetic")
    if syn:
        kw.setdefault("input_shape", (syn["channels"], syn["image_size"], syn["image_size"]))
        kw.setdefault("num_classes", syn["num_classes"])
    return kw


def _export_dice_sweep(report, root, out):
    rows = [
        [a["run_id"], a["method"], float(a["dice_p"]), a["ood_set"], a["n_seeds"], a["fpr_at_95_mean"],
         a["fpr_at_95_std"], a["auroc_mean"], a["aupr_mean"]]
        for a in report_rows(report, "aggregate_csv")
        if a["kind"] == "dice" and a["normalize_at_scoring"] == "0" and a["run_id"] in report["config"]["methods"]
    ]
    if not rows:
        raise MissingPlotData("no DICE scores in this report")
    rows.sort(key=lambda r: (r[0], r[2], r[3]))
    path = out / "dice_sweep.csv"
    write_csv(path, ["run_id", "method", "dice_p", "ood_set", "n_seeds", "fpr_at_95_mean", "fpr_at_95_std",
                     "auroc_mean", "aupr_mean"], rows)
    return [path]


def _export_fc_heatmap(report, root, out):
    paths, stats_rows = [], []
    for run in _ok_runs(report):
        m = nn.load_model(root / run["model"])
        w = m.fc_weight.data
        path = out / f"fc_heatmap__{run['run_id']}__seed{run['seed']}.csv"
        write_csv(path, [f"f{j}" for j in range(w.shape[1])], [list(r) for r in w])
        paths.append(path)
        st = fc_weight_stats(w)
        for c in range(w.shape[0]):
            stats_rows.append([run["run_id"], run["seed"], c, st.class_mean[c], st.class_neg_mean[c],
                               st.class_pos_mean[c], st.class_var[c]])
        stats_rows.append([run["run_id"], run["seed"], "all", st.all_mean, st.all_neg_mean, st.all_pos_mean,
                           float(st.class_var.mean())])
    if not paths:
        raise MissingPlotData("no model snapshots")
    stats_path = out / "fc_weight_stats.csv"
    write_csv(stats_path, ["run_id", "seed", "class", "mean", "neg_mean", "pos_mean", "variance"], stats_rows)
    return paths


def read_heatmap(path) -> np.ndarray:
    rows = read_csv(path)
    return np.array([[float(v) for v in r.values()] for r in rows])
