"""Config-driven experiment runner: train, score, evaluate, tabulate, export."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, metrics, nn
from . import score as sc
from . import train as tr
from .config import ExperimentConfig
from .data import Dataset, gen_ood, gen_synthetic_id, read_idx, write_manifest

log = logging.getLogger(__name__)

REPORT_NAME = "report.json"
METRIC_KEYS = ["run_id", "method", "tau", "p_norm", "layer", "seed", "scorer", "kind",
               "normalize_at_scoring", "dice_p", "ood_set"]
METRIC_COLUMNS = METRIC_KEYS + metrics.MetricsReport.columns()
AGG_VALUES = ["fpr_at_95", "auroc", "aupr", "aupr_out", "id_accuracy",
              "separability_feature", "separability_logit"]
AGG_KEYS = ["run_id", "method", "tau", "p_norm", "layer", "scorer", "kind",
            "normalize_at_scoring", "dice_p", "ood_set"]
AGG_COLUMNS = AGG_KEYS + ["n_seeds"] + [f"{v}_{s}" for v in AGG_VALUES for s in ("mean", "std")]
RUN_COLUMNS = ["run_id", "method", "tau", "p_norm", "layer", "seed", "status", "test_accuracy",
               "final_train_loss", "converged", "trace", "model"]


class ExperimentExists(RuntimeError):
    pass


@dataclass(frozen=True)
class RunPlan:
    run_id: str
    spec: nn.ModelSpec


@dataclass
class Datasets:
    train: Dataset
    test: Dataset
    ood: list


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r.get(c)) if isinstance(r, dict) else fmt(c) for c in (header if isinstance(r, dict) else r)])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------
# planning
# ----------------------------------------------------------------------
def plan_runs(cfg: ExperimentConfig) -> list:
    """Distinct trained models: one per method plus each t2fnorm sweep variant."""
    plans: list = []

    def add(run_id, spec):
        if all(p.spec != spec for p in plans):
            plans.append(RunPlan(run_id, spec))

    for method in cfg.methods:
        add(method, cfg.model_spec(method))
    ab = cfg.ablations
    for tau in ab.tau_sweep:
        add(f"t2fnorm-tau{tau:g}", cfg.model_spec("t2fnorm", tau=float(tau)))
    for p in ab.p_norm_sweep:
        add(f"t2fnorm-p{p}", cfg.model_spec("t2fnorm", p_norm=int(p)))
    for layer in ab.layer_sweep:
        spec = cfg.model_spec("t2fnorm", normalize_after_block=int(layer))
        if spec.norm_block == spec.n_blocks:  # same model as the default placement
            spec = cfg.model_spec("t2fnorm")
        add(f"t2fnorm-layer{layer}", spec)
    return plans


def scorer_plan(cfg: ExperimentConfig) -> list:
    out = []
    flags = (False, True) if cfg.ablations.normalize_at_scoring else (False,)
    base = list(cfg.scorers)
    dice_tpl = next((s for s in base if s.kind == "dice"), sc.ScorerSpec("dice"))
    base += [replace(dice_tpl, dice_p=float(p)) for p in cfg.ablations.dice_p_sweep]
    for flag in flags:
        for s in base:
            s = replace(s, normalize_at_scoring=flag)
            if s not in out:
                out.append(s)
    return out


def load_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.data
    if d.synthetic is not None:
        train = gen_synthetic_id(d.synthetic, "train")
        stats = (train.mean, train.std)
        test = gen_synthetic_id(d.synthetic, "test", stats)
    else:
        train = read_idx(d.idx.train_images, d.idx.train_labels, ds_id="idx-train")
        stats = (train.mean, train.std)
        test = read_idx(d.idx.test_images, d.idx.test_labels, stats, ds_id="idx-test")
    ood = []
    for o in d.ood_sets:
        if o.kind == "idx":
            ood.append(read_idx(o.images, None, stats, ds_id=o.name))
        else:
            ds = gen_ood(o.kind, o.size, o.seed, d.synthetic, stats, o.shift)
            ds.id = o.name
            ood.append(ds)
    return Datasets(train, test, ood)


def _dice_sample(cfg: ExperimentConfig, ds: Datasets) -> Dataset:
    n = min(cfg.dice_samples, len(ds.train))
    idx = np.sort(np.random.default_rng(12345).permutation(len(ds.train))[:n])
    return ds.train.subset(idx, "-dice")


def _tag(spec: nn.ModelSpec) -> dict:
    uses_tau = spec.method == "t2fnorm"
    return {
        "method": spec.method,
        "tau": spec.tau if uses_tau else None,
        "p_norm": spec.p_norm if uses_tau else None,
        "layer": spec.norm_block if uses_tau else None,
    }


# ----------------------------------------------------------------------
# one (run, seed)
# ----------------------------------------------------------------------
def _execute(cfg: ExperimentConfig, plan: RunPlan, seed: int, ds: Datasets, dice_ds: Dataset,
             scorers: list, out: Path) -> tuple:
    run_dir = out / f"{plan.run_id}__seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    model_id = f"{plan.run_id}-s{seed}"
    info = {"run_id": plan.run_id, "seed": seed, **_tag(plan.spec)}
    m = nn.init_model(plan.spec, seed)
    try:
        traces = tr.train(m, ds.train, replace(cfg.train, seed=seed), ds.test, ds.ood[0])
    except tr.TrainingDiverged as exc:
        log.error("%s seed %d diverged: %s", plan.run_id, seed, exc)
        return {**info, "status": "diverged", "error": str(exc)}, []

    trace_path = run_dir / "traces.csv"
    model_path = run_dir / "model.snap"
    tr.write_traces(trace_path, traces)
    nn.save_model(m, model_path)
    acc = tr.accuracy(m, ds.test)
    run_info = {
        **info,
        "status": "ok",
        "test_accuracy": acc,
        "final_train_loss": traces[-1].train_loss if traces else None,
        "converged": tr.converged(traces, plan.spec.num_classes),
        "trace": str(trace_path.relative_to(out)),
        "model": str(model_path.relative_to(out)),
    }

    rows = []
    masks: dict = {}
    fitted_t: dict = {}
    for spec in scorers:
        flag = spec.normalize_at_scoring
        mask = temp = None
        if spec.kind == "dice":
            key = (spec.dice_p, flag)
            if key not in masks:
                masks[key] = sc.dice_precompute(m, dice_ds, spec.dice_p, flag)
            mask = masks[key]
        if spec.kind == "tempscale" and spec.tempscale_T is None:
            if flag not in fitted_t:
                logits, _, _ = tr.score_outputs(m, dice_ds.images, flag)
                fitted_t[flag] = sc.fit_temperature(logits, dice_ds.labels)
            temp = fitted_t[flag]
        id_set = sc.score_dataset(m, ds.test, spec, model_id, mask, temp)
        id_set.write_csv(run_dir / id_set.filename())
        id_f, id_l = tr.mean_norms(m, ds.test, flag)
        for ood in ds.ood:
            ood_set = sc.score_dataset(m, ood, spec, model_id, mask, temp)
            ood_set.write_csv(run_dir / ood_set.filename())
            ood_f, ood_l = tr.mean_norms(m, ood, flag)
            rep = metrics.evaluate(
                id_set.scores, ood_set.scores,
                id_accuracy=acc,
                separability_feature=id_f / ood_f if ood_f else math.inf,
                separability_logit=id_l / ood_l if ood_l else math.inf,
                id_feature_norm=id_f, ood_feature_norm=ood_f,
                id_logit_norm=id_l, ood_logit_norm=ood_l,
            )
            rows.append({
                **info, "scorer": spec.key, "kind": spec.kind, "normalize_at_scoring": flag,
                "dice_p": spec.dice_p if spec.kind == "dice" else None, "ood_set": ood.id,
                **rep.as_dict(),
            })
    write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, rows)
    return run_info, rows


# ----------------------------------------------------------------------
def aggregate(rows: list) -> list:
    """Mean and sample std across seeds for each (run, scorer, OOD set)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(fmt(r[k]) for k in AGG_KEYS), []).append(r)
    out = []
    for key, grp in groups.items():
        first = grp[0]
        row = {k: first[k] for k in AGG_KEYS}
        row["n_seeds"] = len(grp)
        for v in AGG_VALUES:
            vals = [float(g[v]) for g in grp if g[v] not in (None, "")]
            if vals:
                row[f"{v}_mean"] = math.fsum(vals) / len(vals)
                row[f"{v}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def run_experiment(cfg: ExperimentConfig, force: bool = False, threads: int = 1) -> dict:
    """Train every (run, seed), score every (scorer, OOD set), write all artifacts.

    Refuses to overwrite an output directory holding a report for the same
    config unless ``force``.
    """
    out = Path(cfg.output_dir)
    cfg_hash = cfg.config_hash()
    report_path = out / REPORT_NAME
    if report_path.exists() and not force:
        old = json.loads(report_path.read_text()).get("config_hash")
        if old == cfg_hash:
            raise ExperimentExists(f"{out} already holds results for config {cfg_hash}; use --force to rerun")
        raise ExperimentExists(f"{out} holds results for a different config ({old}); use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    ds = load_datasets(cfg)
    if cfg.data.synthetic is not None:
        write_manifest(out / "data_manifest.csv", cfg.data.synthetic, [ds.train, ds.test] + ds.ood)
    dice_ds = _dice_sample(cfg, ds)
    plans = plan_runs(cfg)
    scorers = scorer_plan(cfg)
    jobs = [(p, s) for p in plans for s in cfg.seeds]

    def job(item):
        p, s = item
        return _execute(cfg, p, s, ds, dice_ds, scorers, out)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]

    runs = [r for r, _ in results]
    rows = [row for _, rs in results for row in rs]
    agg = aggregate(rows)
    write_csv(out / "runs.csv", RUN_COLUMNS, runs)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    write_csv(out / "aggregate.csv", AGG_COLUMNS, agg)

    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg_hash,
        "provenance": {
            "code_version": __version__,
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "monitor_ood_set": ds.ood[0].id,
            "id_test_set": ds.test.id,
        },
        "runs": runs,
        "metrics_csv": "metrics.csv",
        "aggregate_csv": "aggregate.csv",
        "runs_csv": "runs.csv",
        "complete": all(r["status"] == "ok" for r in runs),
    }
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    report["dir"] = str(out)
    return report


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_NAME
    report = json.loads(path.read_text())
    report["dir"] = str(path.parent)
    return report


def report_rows(report: dict, name: str = "metrics_csv") -> list:
    return read_csv(Path(report["dir"]) / report[name])
