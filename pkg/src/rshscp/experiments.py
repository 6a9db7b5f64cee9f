"""Desk-scale experiment presets and table runners shared by the CLI and tests.

The desk-scale simulation shrinks the site sizes to 50/75/100/125 and sizes
the site basis to the subject signal (``site_to_signal=1``, ``u_sd=0.3``), so
site labels are recoverable from the raw matrices at every depth.
"""

import time

import numpy as np

from .baselines import combat_hscp_fit
from .evaluation import model_accuracy, site_prediction_cv, split_sample_reproducibility
from .model import Hyperparams
from .optimizer import fit
from .simulation import SimSpec, generate

DESK_SITES = (50, 75, 100, 125)
DESK_SIM = {"p": 50, "subjects_per_site": DESK_SITES, "site_to_signal": 1.0, "u_sd": 0.3}

TABLE_METHODS = ("hscp", "combat_hscp", "adv_hscp", "rshscp", "adv_rshscp")
METHOD_LABELS = {
    "hscp": "hSCP",
    "combat_hscp": "ComBat hSCP",
    "adv_hscp": "Adv. hSCP",
    "rshscp": "rshSCP",
    "adv_rshscp": "Adv. rshSCP",
}

BASE_HP = {
    "tau": 10.0,
    "alpha": 1e4,
    "beta": 1.0,
    "mu": 5.0,
    "lr_w": 1e-2,
    "lr_lambda": 1e-2,
    "lr_u": 1e-2,
    "lr_v": 1e-3,
    "lr_attack": 1e-2,
    "lr_classifier": 1e-2,
    "classifier_steps": 5,
    "max_iters": 1500,
    "adv_start_iter": 200,
    "stop_tol": 1e-7,
}
SITE_GAMMA = 10.0


def desk_spec(seed, widths=(10,), **overrides):
    return SimSpec(**{**DESK_SIM, "widths": tuple(widths), "seed": int(seed), **overrides})


def method_hyperparams(method, widths, seed=0, **overrides):
    """Calibrated settings for ``method``; rshSCP variants get the site adversary."""
    d = dict(BASE_HP, k=tuple(widths), seed=int(seed))
    if method in ("rshscp", "adv_rshscp"):
        d["gamma"] = SITE_GAMMA
    d.update(overrides)
    if d["adv_start_iter"] > d["max_iters"]:
        d["adv_start_iter"] = d["max_iters"]
    return Hyperparams.from_dict(d)


def run_method(data, method, hp):
    if method == "combat_hscp":
        return combat_hscp_fit(data, hp)
    return fit(data, hp, method)


def _fit_fn(method, hp):
    return lambda d: run_method(d, method, hp).model


def run_table(seeds, widths_list, methods=TABLE_METHODS, reproducibility=False,
              site_cv=False, repeats=1, overrides=None, sim_overrides=None, log=None):
    """One row per (method, widths, seed) with accuracy and optional extras.

    ``overrides`` applies to every method's hyperparameters; ``sim_overrides``
    to the simulation.  ``log`` receives one progress string per fit.
    """
    rows = []
    for widths in widths_list:
        for seed in seeds:
            data, truth = generate(desk_spec(seed, widths, **(sim_overrides or {})))
            for method in methods:
                hp = method_hyperparams(method, widths, seed, **(overrides or {}))
                t0 = time.perf_counter()
                rep = run_method(data, method, hp)
                row = {"method": method, "k": "-".join(map(str, widths)), "seed": int(seed),
                       "accuracy": model_accuracy(rep.model, truth),
                       "reconstruction_error": rep.recon_trace[-1], "n_iter": rep.n_iter}
                if site_cv:
                    row["site_cv_logistic"] = site_prediction_cv(rep.model.features(),
                                                                 data.sites, rng=seed)
                if reproducibility:
                    mean, sd, _ = split_sample_reproducibility(
                        data, hp, method, rng=seed, repeats=repeats,
                        fit_fn=_fit_fn(method, hp))
                    row["reproducibility"] = mean
                row["seconds"] = time.perf_counter() - t0
                rows.append(row)
                if log is not None:
                    log(" ".join(f"{k}={_short(v)}" for k, v in row.items()))
    return rows


def _short(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def summarize(rows, value="accuracy"):
    """Mean and sd of ``value`` per (method, k)."""
    out = {}
    for row in rows:
        if value not in row:
            continue
        out.setdefault((row["method"], row["k"]), []).append(row[value])
    return {key: (float(np.mean(v)), float(np.std(v)), len(v)) for key, v in out.items()}


def _k_order(keys):
    return sorted(keys, key=lambda s: [int(x) for x in s.split("-")])


def wide_table(rows, value="accuracy"):
    """Methods as rows and one ``k=...`` mean column (plus ``_sd``) per width.

    Returns ``(rows, columns)`` ready for :func:`rshscp.io.write_csv`.
    """
    stats = summarize(rows, value)
    methods = [m for m in TABLE_METHODS if any(key[0] == m for key in stats)]
    methods += sorted({key[0] for key in stats} - set(methods))
    ks = _k_order({key[1] for key in stats})
    columns = ["method"] + [c for k in ks for c in (f"k={k}", f"k={k}_sd")]
    out = []
    for m in methods:
        row = {"method": METHOD_LABELS.get(m, m)}
        for k in ks:
            if (m, k) in stats:
                row[f"k={k}"], row[f"k={k}_sd"] = stats[(m, k)][:2]
        out.append(row)
    return out, columns


def markdown_table(rows, value="accuracy"):
    """Methods as rows, widths as columns, ``mean +- sd`` cells."""
    stats = summarize(rows, value)
    methods = [m for m in TABLE_METHODS if any(key[0] == m for key in stats)]
    methods += sorted({key[0] for key in stats} - set(methods))
    ks = _k_order({key[1] for key in stats})
    lines = ["| Method | " + " | ".join(f"k={k}" for k in ks) + " |",
             "|---" * (len(ks) + 1) + "|"]
    for m in methods:
        cells = []
        for k in ks:
            if (m, k) in stats:
                mean, sd, _ = stats[(m, k)]
                cells.append(f"{mean:.3f} +- {sd:.3f}")
            else:
                cells.append("")
        lines.append(f"| {METHOD_LABELS.get(m, m)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
