"""Benchmark cells, deletion streams and their on-disk artifacts.

A cell is one (method, dataset, seed) run: train, delete, always retrain the
naive baseline on the same deletions, then measure.  Everything that lands in
``report.json`` is a function of the resolved configuration except wall
times and the timestamp, which ``deterministic=True`` replaces with nulls.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .core import LossSpec, RngStream, decision_function, remove_rows
from .dare import save_forest
from .data import CsvSchema, ingest_csv, make_blobs, train_test_split
from .errors import ConfigError
from .evaluation import (
    EvalReport,
    acc_err,
    accuracy,
    calibrate,
    con_kl,
    disagree_consistency,
    monitor_proxies,
    param_diff,
    r_squared,
    sape,
    speedup,
    write_predictions,
)
from .methods import REGISTRY, LinearMechanism, build_method
from .sisa import save_sisa
from .trainer import TrainConfig, write_ukh1

DEFAULTS = {
    "seed": 0,
    "data": {
        "source": "blobs",
        "n": 2000,
        "p": 10,
        "sep": 2.0,
        "path": "",
        "label": "label",
        "id_column": "",
        "test_fraction": 0.25,
    },
    "model": {"loss": "logistic", "l2": 1e-3, "steps": 100, "learning_rate": 0.5, "schedule": "constant"},
    "method": {"name": "sisa"},
    "hyper": {},
    "deletion": {"count": 10, "distribution": "uniform", "candidates": 1000, "mode": "batch"},
    "tolerances": {"effectiveness": math.inf, "certifiability": math.inf},
    "stream": {"retrain_every": 0, "oracle": True},
    "timing": {"repeats": 3},
    "grid": {},
}

PREDICTION_CAP = 1e-300


# -- configuration -------------------------------------------------------------


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(config: dict) -> dict:
    cfg = merge(DEFAULTS, config)
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer")
    if cfg["method"].get("name") not in REGISTRY:
        raise ConfigError(f"method.name must be one of {sorted(REGISTRY)}")
    if cfg["deletion"]["distribution"] not in ("uniform", "worst_of_n"):
        raise ConfigError("deletion.distribution must be 'uniform' or 'worst_of_n'")
    if cfg["deletion"]["mode"] not in ("batch", "sequential"):
        raise ConfigError("deletion.mode must be 'batch' or 'sequential'")
    if cfg["data"]["source"] == "csv" and not Path(cfg["data"]["path"]).is_file():
        raise ConfigError(f"data.path {cfg['data']['path']!r} does not exist")
    return cfg


def load_data(cfg: dict):
    d = cfg["data"]
    if d["source"] == "blobs":
        data = make_blobs(int(d["n"]), int(d["p"]), float(d["sep"]), cfg["seed"])
        name = f"blobs(n={d['n']},p={d['p']},sep={d['sep']})"
    elif d["source"] == "csv":
        data = ingest_csv(d["path"], CsvSchema(d["label"], d["id_column"] or None))
        name = Path(d["path"]).name
    else:
        raise ConfigError(f"unknown data.source {d['source']!r}")
    train, test = train_test_split(data, float(d["test_fraction"]), RngStream(cfg["seed"], 1))
    return train, test, name


def method_from(cfg: dict):
    m = cfg["model"]
    spec = LossSpec(m["loss"], float(m["l2"]))
    tcfg = TrainConfig(steps=int(m["steps"]), learning_rate=float(m["learning_rate"]), schedule=m["schedule"])
    name = cfg["method"]["name"]
    hyper = dict(cfg["hyper"].get(name, {}))
    hyper.update({k: v for k, v in cfg["method"].items() if k != "name"})
    try:
        return build_method(name, spec, tcfg, RngStream(cfg["seed"], 2), **hyper)
    except TypeError as exc:
        raise ConfigError(f"bad hyperparameters for {name}: {exc}") from None


def prepare_output(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force or pick a fresh one")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- deletion selection ---------------------------------------------------------------


def sample_losses(mech, state, data) -> np.ndarray:
    probs = mech.predict_proba(state, data.features)
    return -np.log(np.maximum(probs[np.arange(data.n), data.labels], PREDICTION_CAP))


def choose_deletions(mech, state, data, cfg: dict, rng: RngStream):
    """Returns ``(ids, log)``; ``log`` rows are ``(round, candidate, loss, chosen)``."""
    d = cfg["deletion"]
    count = int(d["count"])
    if count >= data.n:
        raise ConfigError(f"cannot delete {count} of {data.n} training rows")
    gen = rng.generator()
    if d["distribution"] == "uniform":
        ids = np.sort(gen.choice(data.ids, size=count, replace=False))
        return [int(i) for i in ids], []
    losses = dict(zip(data.ids.tolist(), sample_losses(mech, state, data).tolist()))
    remaining = data.ids.copy()
    chosen, log = [], []
    for r in range(count):
        cand = gen.choice(remaining, size=min(int(d["candidates"]), remaining.size), replace=False)
        vals = np.array([losses[int(c)] for c in cand])
        pick = int(cand[int(np.argmax(vals))])
        log.extend((r, int(c), float(v), int(c) == pick) for c, v in zip(cand, vals))
        chosen.append(pick)
        remaining = remaining[remaining != pick]
    return chosen, log


# -- one cell -----------------------------------------------------------------------


def _apply_deletions(mech, state, data, ids, mode):
    if mode == "batch":
        out = mech.unlearn(state, data, ids)
        return out, mech.last_cost
    cost, current = 0, data
    for k, z in enumerate(ids):
        if getattr(mech, "replay", False):
            out = mech.unlearn(state, data, ids[: k + 1])
        else:
            state = out = mech.unlearn(state, current, [z])
            current = remove_rows(current, [z])
        cost += mech.last_cost
    return out, cost


def _timed(fn, repeats):
    times, result = [], None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, statistics.median(times)


def _metric(mech, state, data, loss_kind):
    if loss_kind == "squared" and isinstance(mech, LinearMechanism):
        return r_squared(decision_function(mech.params(state), data.features), data.labels)
    return accuracy(mech.predict(state, data.features), data.labels)


def _persist_model(mech, state, path_stem):
    if mech.name == "sisa":
        save_sisa(state, path_stem)
    elif mech.name == "dare":
        save_forest(state, str(path_stem) + ".ukf")
    else:
        write_ukh1(str(path_stem) + ".ukh", mech.params(state), None, {"method": mech.name})


def run_benchmark(config: dict, out_dir, deterministic: bool = False, force: bool = False):
    """Run one cell; returns ``(EvalReport, exit_code)``.

    Exit code 2 signals that acc_err exceeded the effectiveness tolerance or
    acc_dis exceeded the certifiability tolerance.
    """
    cfg = resolve(config)
    out = prepare_output(out_dir, force)
    train, test, dname = load_data(cfg)
    mech = method_from(cfg)
    state = mech.train(train)
    ids, selection_log = choose_deletions(mech, state, train, cfg, RngStream(cfg["seed"], 3))
    repeats = 1 if deterministic else int(cfg["timing"]["repeats"])
    mode = cfg["deletion"]["mode"]

    (unlearned, cost_u), t_u = _timed(lambda: _apply_deletions(mech, state, train, ids, mode), repeats)
    naive, t_n = _timed(lambda: mech.naive(train, ids), repeats)
    cost_n = mech.last_cost

    loss_kind = cfg["model"]["loss"]
    du = train.subset(ids)
    m_u, m_n = _metric(mech, unlearned, test, loss_kind), _metric(mech, naive, test, loss_kind)
    pred_u, pred_n = mech.predict(unlearned, test.features), mech.predict(naive, test.features)
    prob_u, prob_n = mech.predict_proba(unlearned, test.features), mech.predict_proba(naive, test.features)
    notes = []
    kl = con_kl(prob_u, prob_n)
    if not math.isfinite(kl):
        notes.append("kl is infinite: the unlearned model gives zero probability where the baseline does not")
        kl = None
    pu, pn = mech.params(unlearned), mech.params(naive)
    report = EvalReport(
        method=mech.name,
        dataset=dname,
        deletion={"ids": ids, **{k: cfg["deletion"][k] for k in ("count", "distribution", "mode")}},
        speedup=None if deterministic else speedup(t_n, t_u),
        speedup_cost=speedup(cost_n, cost_u) if cost_u > 0 and cost_n > 0 else None,
        acc_err=acc_err(m_u, m_n),
        param_diff=None if pu is None or pn is None or np.shape(pu) != np.shape(pn) else param_diff(pu, pn),
        disagree_pct=disagree_consistency(pred_u, pred_n),
        kl=kl,
        acc_dis=sape(accuracy(mech.predict(unlearned, du.features), du.labels),
                     accuracy(mech.predict(naive, du.features), du.labels)),
        wall_time_naive=None if deterministic else t_n,
        wall_time_unlearn=None if deterministic else t_u,
        cost_naive=int(cost_n),
        cost_unlearn=int(cost_u),
        sigma=_declared(cfg, "sigma"),
        epsilon=_declared(cfg, "epsilon"),
        delta=_declared(cfg, "delta"),
        notes=notes,
        extra={"metric_unlearned": m_u, "metric_naive": m_n, "seed": cfg["seed"], "n_train": train.n,
               "n_test": test.n},
    )
    if not deterministic:
        report.extra["timestamp"] = datetime.now(timezone.utc).isoformat()

    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv_row())
    (out / "config.resolved.json").write_text(json.dumps(cfg, sort_keys=True, indent=2, default=str) + "\n")
    write_predictions(out / "predictions_unlearned.csv", test.ids, test.labels, pred_u, prob_u)
    write_predictions(out / "predictions_naive.csv", test.ids, test.labels, pred_n, prob_n)
    with open(out / "deletions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "candidate", "loss", "chosen"])
        if selection_log:
            w.writerows((r, c, repr(v), int(ch)) for r, c, v, ch in selection_log)
        else:
            w.writerows((r, z, "", 1) for r, z in enumerate(ids))
    _persist_model(mech, unlearned, out / "model_unlearned")
    _persist_model(mech, naive, out / "model_naive")

    tol = cfg["tolerances"]
    breach = report.acc_err > float(tol["effectiveness"]) or report.acc_dis > float(tol["certifiability"])
    return report, 2 if breach else 0


def _declared(cfg, key):
    v = cfg["method"].get(key, cfg.get("certificate", {}).get(key))
    return None if v is None else float(v)


# -- grids of cells -----------------------------------------------------------------------


def _cell_worker(args):
    config, out_dir, deterministic, force = args
    report, code = run_benchmark(config, out_dir, deterministic, force)
    return report.to_dict(), code


def run_grid(config: dict, out_dir, deterministic=False, force=False, jobs=1):
    """Expand ``grid.methods`` x ``grid.seeds`` into cells, optionally in parallel.

    Results are merged into ``summary.csv`` ordered by cell key, so the
    worker count never changes the output.
    """
    cfg = merge(DEFAULTS, config)
    methods = cfg["grid"].get("methods") or [cfg["method"]["name"]]
    seeds = cfg["grid"].get("seeds") or [cfg["seed"]]
    out = prepare_output(out_dir, force)
    cells = []
    for name, seed in itertools.product(methods, seeds):
        c = merge(cfg, {"seed": int(seed), "grid": {}})
        c["method"] = {"name": name} if name != cfg["method"]["name"] else dict(cfg["method"])
        cells.append(((name, int(seed)), (c, out / f"{name}_seed{seed}", deterministic, force)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_worker, [a for _, a in cells]))
    else:
        results = [_cell_worker(a) for _, a in cells]
    merged = sorted(zip([k for k, _ in cells], results))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method", "seed") + EvalReport.CSV_FIELDS[2:])
        for (name, seed), (rep, _) in merged:
            w.writerow([name, seed] + ["" if rep[f] is None else _cell(rep[f]) for f in EvalReport.CSV_FIELDS[2:]])
    return merged, max(code for _, (_, code) in merged)


def _cell(v):
    return repr(v) if isinstance(v, float) else v


# -- monitored deletion stream -------------------------------------------------------


STREAM_FIELDS = (
    "step", "deleted_id", "decision", "metric_test", "tilde_acc_dis", "tilde_acc_err", "tilde_speedup",
    "true_acc_dis", "true_acc_err", "c", "e",
)


def simulate_stream(config: dict, out_dir=None, deterministic=False, force=False):
    """Delete one sample at a time, watch the proxies, retrain on breach.

    With ``stream.oracle`` the naive retrain is computed at every step so the
    log carries true acc_dis/acc_err next to their proxies.  After each full
    retrain the calibration constants ``c`` and ``e`` are re-estimated from
    the window that just ended and applied to the next one.  Returns the
    list of log rows (dicts keyed by ``STREAM_FIELDS``).
    """
    cfg = resolve(config)
    train, test, _ = load_data(cfg)
    mech = method_from(cfg)
    tol = cfg["tolerances"]
    tol_dis, tol_err = float(tol["certifiability"]), float(tol["effectiveness"])
    oracle = bool(cfg["stream"]["oracle"])
    every = int(cfg["stream"]["retrain_every"])
    loss_kind = cfg["model"]["loss"]

    t0 = time.perf_counter()
    state = mech.train(train)
    retrain_time = time.perf_counter() - t0
    retrain_cost = mech.train_cost(state)
    baseline = _metric(mech, state, test, loss_kind)
    ids, _ = choose_deletions(mech, state, train, cfg, RngStream(cfg["seed"], 3))

    base_data, base_state = train, state
    current, deleted, since_retrain = train, [], []
    c = e = 1.0
    win_true_dis, win_proxy_dis, win_true_err, win_proxy_err = [], [], [], []
    rows = []
    for step, z in enumerate(ids, start=1):
        deleted.append(z)
        since_retrain.append(z)
        t0 = time.perf_counter()
        if getattr(mech, "replay", False):
            state = mech.unlearn(base_state, base_data, since_retrain)
        else:
            state = mech.unlearn(state, current, [z])
        unlearn_time = time.perf_counter() - t0
        unlearn_cost = mech.last_cost
        current = remove_rows(current, [z])
        metric = _metric(mech, state, test, loss_kind)
        if deterministic:
            reading = monitor_proxies(metric, baseline, c, e, retrain_cost, max(unlearn_cost, 1), tol_dis, tol_err)
        else:
            reading = monitor_proxies(metric, baseline, c, e, retrain_time, unlearn_time, tol_dis, tol_err)
        true_dis = true_err = None
        naive_state = None
        if oracle:
            naive_state = mech.naive(train, deleted)
            du = train.subset(deleted)
            true_dis = sape(accuracy(mech.predict(state, du.features), du.labels),
                            accuracy(mech.predict(naive_state, du.features), du.labels))
            true_err = abs(metric - _metric(mech, naive_state, test, loss_kind))
            win_true_dis.append(true_dis)
            win_proxy_dis.append(sape(metric, baseline))
            win_true_err.append(true_err)
            win_proxy_err.append(abs(metric - baseline))
        retrain = reading.breach or (every > 0 and step % every == 0)
        rows.append({
            "step": step, "deleted_id": int(z), "decision": "retrain" if retrain else "continue",
            "metric_test": metric, "tilde_acc_dis": reading.tilde_acc_dis, "tilde_acc_err": reading.tilde_acc_err,
            "tilde_speedup": reading.tilde_speedup, "true_acc_dis": true_dis, "true_acc_err": true_err,
            "c": c, "e": e,
        })
        if retrain:
            t0 = time.perf_counter()
            state = naive_state if naive_state is not None else mech.naive(train, deleted)
            retrain_time = time.perf_counter() - t0
            retrain_cost = mech.last_cost if naive_state is None else retrain_cost
            baseline = _metric(mech, state, test, loss_kind)
            base_data, base_state, since_retrain = current, state, []
            if getattr(mech, "replay", False):
                # a replay mechanism needs a history of the current data
                base_state = mech.train(current)
            if oracle:
                c = calibrate(win_true_dis, win_proxy_dis)
                e = calibrate(win_true_err, win_proxy_err)
                win_true_dis, win_proxy_dis, win_true_err, win_proxy_err = [], [], [], []
    if out_dir is not None:
        out = prepare_output(out_dir, force)
        with open(out / "stream.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STREAM_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
    return rows
