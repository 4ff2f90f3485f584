"""Seeded simulation studies producing long-format records and summaries.

Four studies are available:

``inverse_bound``
    random measures around a truth, paired ``(W1(G, G0), E_X V(f_G, f_G0))``.
``rate_curve``
    EM error against sample size in the exact-fitted (``W1``) or over-fitted
    (``W2``) setting, with a log-log slope fit.
``posterior_contraction``
    posterior mean ``W1`` of a Gibbs chain against sample size.
``subsample_stability``
    distance of subsample fits to the full-data fit, unrestricted and
    restricted to rows close to the negative-binomial pathology.

Every replicate draws its random stream from ``(seed, n index, replicate)`` so
results do not depend on the order in which jobs finish.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._version import __version__
from .bayes import MCMCConfig, MCMCError, PriorSpec, posterior_w1, run_gibbs
from .em import EMConfig, EMError, ModelShape, fit
from .identifiability import nb_pathology_gap
from .kernels import Binomial, NegativeBinomial, NormalFixedVariance
from .links import Constant, LogLinear, Polynomial, PowerProduct, SigmoidLinear
from .measures import Box, MixingMeasure, perturb, wasserstein_distance
from .model import (
    CovariateDistribution,
    Dataset,
    LogUniform,
    MixtureRegressionModel,
    ModelError,
    Uniform,
    covariates_from_dict,
    expected_total_variation,
)

log = logging.getLogger(__name__)

FULL_DATA_STREAM = 2**31 - 1  # seed-stream index reserved for the synthetic full dataset

VARIANTS = ("inverse_bound", "rate_curve", "posterior_contraction", "subsample_stability")


class ExperimentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# default truths


def binomial_truth() -> MixtureRegressionModel:
    """Unconditional two-atom Bernoulli mixture ``0.5 delta_0.3 + 0.5 delta_0.7``."""
    return MixtureRegressionModel(Binomial(1), Constant(), MixingMeasure([0.5, 0.5], [[0.3], [0.7]]))


def logistic_truth() -> MixtureRegressionModel:
    """Mixture of two logistic regressions ``sigmoid(theta x)`` with ``theta = 0.5, 5``."""
    return MixtureRegressionModel(
        Binomial(1), SigmoidLinear(1, intercept=False), MixingMeasure([0.5, 0.5], [[0.5], [5.0]])
    )


def normal_truth() -> MixtureRegressionModel:
    """Quadratic-mean Gaussian mixture with unit variance."""
    G = MixingMeasure([0.5, 0.5], [[1.0, -5.0, 1.0], [2.0, 5.0, 2.0]])
    return MixtureRegressionModel(NormalFixedVariance(1.0), Polynomial(2), G)


def nb_pathological_truth() -> MixtureRegressionModel:
    """Two NB regressions with equal mean/dispersion ratio and dispersion gap 1."""
    G = MixingMeasure([0.4, 0.6], [[0.0, 1.0], [np.log(3.0), 1.0]], [[0.5], [1.5]])
    return MixtureRegressionModel(NegativeBinomial(), LogLinear(1), G, Constant())


def crash_truth() -> MixtureRegressionModel:
    """Two NB regressions with power-product means over two traffic flows."""
    G = MixingMeasure(
        [0.43, 0.57],
        [[-10.9407, 0.8588, 0.5056], [-9.7842, 0.3987, 0.8703]],
        [[9.3692], [8.2437]],
    )
    return MixtureRegressionModel(NegativeBinomial(), PowerProduct(2), G, Constant(2))


CRASH_COVARIATES = LogUniform((10000.0, 100.0), (70000.0, 40000.0))


_DEFAULTS = {
    "inverse_bound": {
        "truth": logistic_truth,
        "covariates": lambda: Uniform(-6.0, 6.0),
        "n_grid": (),
        "replicates": 1,
        "options": {
            "samples": 2000,
            "radius": 0.5,
            "weight_scale": 1.0,
            "mc_points": 2000,
            "fiber_witnesses": 0,
            "small_w1": 0.05,
        },
    },
    "rate_curve": {
        "truth": normal_truth,
        "covariates": lambda: Uniform(-3.0, 3.0),
        "n_grid": (200, 400, 800, 1600, 3200, 6400, 12800),
        "replicates": 16,
        "options": {
            "setting": "exact",
            "K": None,
            # None: 32 for exact fits (the two curves can be swapped where they
            # cross, a basin most random starts fall into), 8 for over-fitted ones
            "restarts": None,
            "box_halfwidth": 10.0,
            "max_iter": 2000,
            "truth_init_arm": False,
        },
    },
    "posterior_contraction": {
        "truth": nb_pathological_truth,
        "covariates": lambda: Uniform(0.0, 5.0),
        "n_grid": (200, 800, 3200),
        "replicates": 8,
        "options": {
            "iterations": 2500,
            "burn_in": 500,
            "proposal_cov": 0.01,
            "eta_shape": 0.01,
            "eta_rate": 0.01,
            "eta_bounds": [0.05, 20.0],
        },
    },
    "subsample_stability": {
        "truth": crash_truth,
        "covariates": lambda: CRASH_COVARIATES,
        "n_grid": (100, 200, 400),
        "replicates": 8,
        "options": {
            "full_n": 868,
            "band": 0.3,
            "m_step": "em1",
            "nu": 1e-4,
            "max_iter": 2000,
        },
    },
}

_INVERSE_CASES = {
    "binomial": {
        "truth": binomial_truth,
        "covariates": lambda: Uniform(0.0, 1.0),
        "options": {"radius": 0.2, "mc_points": 1, "fiber_witnesses": 20},
    },
    "logistic": {},
}


# ---------------------------------------------------------------------------
# spec and result containers


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved description of one study."""

    variant: str
    truth: MixtureRegressionModel
    covariates: CovariateDistribution
    n_grid: tuple = ()
    replicates: int = 1
    seed: int = 0
    options: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ExperimentError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        grid = tuple(int(n) for n in self.n_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ExperimentError("n_grid must be strictly increasing")
        if any(n < 1 for n in grid):
            raise ExperimentError("n_grid entries must be positive")
        if self.replicates < 1:
            raise ExperimentError("replicates must be >= 1")
        if self.variant != "inverse_bound" and not grid:
            raise ExperimentError(f"{self.variant} needs a nonempty n_grid")
        object.__setattr__(self, "n_grid", grid)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "truth": self.truth.to_dict(),
            "covariates": self.covariates.to_dict(),
            "n_grid": list(self.n_grid),
            "replicates": self.replicates,
            "seed": self.seed,
            "options": _jsonable(self.options),
            "workers": self.workers,
        }


def default_spec(variant: str, case: Optional[str] = None, **overrides) -> ExperimentSpec:
    """Spec with the built-in defaults for ``variant``; keyword overrides win.

    ``case`` selects ``"binomial"`` or ``"logistic"`` for the inverse-bound
    study. ``options`` overrides are merged into the defaults.
    """
    if variant not in _DEFAULTS:
        raise ExperimentError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    base = dict(_DEFAULTS[variant])
    options = dict(base["options"])
    if variant == "inverse_bound":
        extra = _INVERSE_CASES.get(case or "logistic")
        if extra is None:
            raise ExperimentError(f"unknown inverse-bound case {case!r}")
        base.update({k: v for k, v in extra.items() if k != "options"})
        options.update(extra.get("options", {}))
    elif case is not None:
        raise ExperimentError("case only applies to the inverse_bound variant")
    options.update(overrides.pop("options", {}) or {})
    kw = {
        "variant": variant,
        "truth": base["truth"](),
        "covariates": base["covariates"](),
        "n_grid": base["n_grid"],
        "replicates": base["replicates"],
        "options": options,
    }
    kw.update(overrides)
    return ExperimentSpec(**kw)


def spec_from_dict(d: dict) -> ExperimentSpec:
    """Build a spec from JSON: defaults for the variant, then the given fields."""
    d = dict(d)
    variant = d.pop("variant", None)
    if variant is None:
        raise ExperimentError("spec needs a 'variant'")
    case = d.pop("case", None)
    over: dict = {}
    if "truth" in d:
        try:
            over["truth"] = MixtureRegressionModel.from_dict(d.pop("truth"))
        except (KeyError, ValueError) as exc:
            raise ExperimentError(f"invalid truth model: {exc}") from None
    if "covariates" in d:
        over["covariates"] = covariates_from_dict(d.pop("covariates"))
    for key in ("n_grid", "replicates", "seed", "options", "workers"):
        if key in d:
            over[key] = d.pop(key)
    if d:
        raise ExperimentError(f"unknown spec fields: {sorted(d)}")
    return default_spec(variant, case, **over)


@dataclass
class ExperimentResult:
    """Long-format records plus aggregate summary and run metadata."""

    records: list
    summary: dict
    meta: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = sorted({k for r in self.records for k in r}, key=_column_order)
        with open(out / "records.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.records:
                w.writerow({k: _csv_value(r.get(k)) for k in cols})
        (out / "summary.json").write_text(json.dumps(_jsonable(self.summary), indent=2, sort_keys=True))
        (out / "meta.json").write_text(json.dumps(_jsonable(self.meta), indent=2, sort_keys=True))


_ORDER = ["n", "replicate", "arm", "sample", "metric", "value", "failed"]


def _column_order(c: str):
    return (_ORDER.index(c), c) if c in _ORDER else (len(_ORDER), c)


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# helpers


def replicate_seed(master: int, n_index: int, replicate: int) -> int:
    """Integer seed derived from ``(master, n index, replicate)``."""
    ss = np.random.SeedSequence([int(master), int(n_index), int(replicate)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def fit_loglog_slope(points: Sequence[tuple]) -> tuple[float, float, float]:
    """Least-squares line through ``(log n, log error)``: ``(slope, intercept, r2)``."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ExperimentError("need at least 3 (n, error) points")
    if np.any(pts <= 0):
        raise ExperimentError("n and error values must be positive")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / tot if tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def _map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _band(values: np.ndarray) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)], float)
    if v.size == 0:
        return {"mean": float("nan"), "median": float("nan"), "q25": float("nan"), "q75": float("nan"), "count": 0}
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"mean": float(v.mean()), "median": float(med), "q25": float(q25), "q75": float(q75), "count": int(v.size)}


def _meta(spec: ExperimentSpec, extra: Optional[dict] = None) -> dict:
    m = {"version": __version__, "spec": spec.to_dict(), "seed_rule": "SeedSequence([seed, n_index, replicate])"}
    if extra:
        m.update(extra)
    return m


def run(spec: ExperimentSpec, data: Optional[Dataset] = None) -> ExperimentResult:
    """Dispatch on ``spec.variant``."""
    if spec.variant == "inverse_bound":
        return run_inverse_bound(spec)
    if spec.variant == "rate_curve":
        return run_rate_curve(spec)
    if spec.variant == "posterior_contraction":
        return run_posterior_contraction(spec)
    return run_subsample_stability(spec, data)


# ---------------------------------------------------------------------------
# inverse bound scatter


def fiber_witnesses(G0: MixingMeasure, count: int, t_max: float = 0.2) -> list[MixingMeasure]:
    """Measures with the same first moment as ``G0`` (moving its first two atoms).

    For a single Bernoulli trial the mixture depends on ``G`` only through
    ``sum_j p_j q_j``, so these measures have exactly the same mixture density
    while sitting at positive Wasserstein distance.
    """
    if G0.k < 2 or G0.d1 != 1 or G0.d2 != 0:
        raise ExperimentError("fiber witnesses need >= 2 scalar atoms")
    p = G0.weights
    out = []
    for t in np.linspace(t_max / count, t_max, count):
        q = np.array(G0.theta1[:, 0], copy=True)
        q[0] -= t
        q[1] += t * p[0] / p[1]
        if q.min() <= 0 or q.max() >= 1:
            continue
        out.append(MixingMeasure(p, q[:, None]))
    return out


def _inverse_job(args):
    truth, px, G, mc_points, seed = args
    V = expected_total_variation(truth.with_measure(G), truth, px, mc_points, seed).value
    return wasserstein_distance(G, truth.G, 1), V


def _inverse_box(truth: MixtureRegressionModel) -> Optional[Box]:
    if truth.kernel.name == "binomial" and truth.link1.kind == "constant":
        return Box([1e-6], [1 - 1e-6])
    return None


def run_inverse_bound(spec: ExperimentSpec) -> ExperimentResult:
    """Scatter of ``(W1(G, G0), E_X V)`` for random measures near the truth.

    Each sample draws its own radius ``r ~ U(0, radius)``, then perturbs the
    atoms by ``U(-r, r)`` and the weights by ``U(-s r, s r)`` with
    ``s = weight_scale``. The same covariate draws are used for every sample.
    """
    o = spec.options
    truth, px = spec.truth, spec.covariates
    G0 = truth.G
    box = _inverse_box(truth)
    rng = np.random.default_rng(replicate_seed(spec.seed, 0, 0))
    mc_seed = replicate_seed(spec.seed, 0, 1)
    mc_points = int(o["mc_points"])
    if truth.link1.kind == "constant" and (truth.link2 is None or truth.link2.kind == "constant"):
        mc_points = 1
    measures = []
    for _ in range(int(o["samples"])):
        r = max(rng.uniform(0.0, o["radius"]), 1e-12)
        measures.append(perturb(G0, r, rng, weight_radius=o["weight_scale"] * r, box=box).with_box(None))
    kinds = ["random"] * len(measures)
    if o.get("fiber_witnesses"):
        wit = fiber_witnesses(G0, int(o["fiber_witnesses"]))
        measures += wit
        kinds += ["fiber_witness"] * len(wit)
    pairs = _map(_inverse_job, [(truth, px, G, mc_points, mc_seed) for G in measures], spec.workers)
    records = []
    for i, ((w1, V), kind) in enumerate(zip(pairs, kinds)):
        records.append({"sample": i, "arm": kind, "metric": "W1", "value": w1})
        records.append({"sample": i, "arm": kind, "metric": "EV", "value": V})
    W = np.array([p[0] for p in pairs])
    V = np.array([p[1] for p in pairs])
    rand = np.array([k == "random" for k in kinds])
    summary = {"samples": int(rand.sum()), "fiber_witnesses": int((~rand).sum())}
    for name, mask in (("random", rand), ("all", np.ones_like(rand))):
        keep = mask & (W > 1e-6)
        ratio = V[keep] / W[keep]
        small = keep & (W < o["small_w1"])
        sr = V[small] / W[small]
        summary[name] = {
            "min_ratio": float(ratio.min()) if ratio.size else None,
            "median_ratio": float(np.median(ratio)) if ratio.size else None,
            "min_ratio_small_w1": float(sr.min()) if sr.size else None,
            "count_small_w1": int(small.sum()),
            "count_bound_violations": int(np.sum(mask & (W >= o["small_w1"]) & (V <= 1e-9))),
            "max_w1": float(W[mask].max()) if mask.any() else None,
        }
    meta = _meta(spec, {"perturbation": "per-sample radius r ~ U(0, radius); then measures.perturb", "mc_points_used": mc_points})
    return ExperimentResult(records, summary, meta)


# ---------------------------------------------------------------------------
# rate curve


def _rate_shape_box(truth: MixtureRegressionModel, halfwidth: float) -> Box:
    d1 = truth.G.d1
    d2 = truth.G.d2
    return Box(np.full(d1, -halfwidth), np.full(d1, halfwidth), np.full(d2, -halfwidth), np.full(d2, halfwidth))


def _rate_job(args):
    truth, px, n, data_seed, fit_seed, K, r, o = args
    data = truth.simulate(px, n, data_seed)
    shape = ModelShape.of(truth)
    m_step = "closed_form" if truth.kernel.name.startswith("normal") else ("gradient" if truth.kernel.name == "negbin" else "em1")
    box = _rate_shape_box(truth, o["box_halfwidth"])
    mode = "exact" if K == truth.K else "overfit"
    restarts = o["restarts"] or (32 if mode == "exact" else 8)
    cfg = EMConfig(K, max_iter=o["max_iter"], m_step=m_step, init="random_from_box", box=box,
                   restarts=restarts, seed=fit_seed, mode=mode)
    out = {}
    try:
        res = fit(cfg, data, shape)
        out["error"] = wasserstein_distance(res.G_hat.with_box(None), truth.G, r)
    except (EMError, ModelError, ValueError) as exc:
        out["error"] = float("nan")
        out["failure"] = str(exc)
    if o.get("truth_init_arm"):
        if K == truth.K:
            G_init = truth.G
        else:
            G_init = _split_measure(truth.G, K)
        cfg_t = replace(cfg, init=G_init, restarts=1)
        try:
            out["error_truth_init"] = wasserstein_distance(fit(cfg_t, data, shape).G_hat.with_box(None), truth.G, r)
        except (EMError, ModelError, ValueError):
            out["error_truth_init"] = float("nan")
    return out


def _split_measure(G: MixingMeasure, K: int) -> MixingMeasure:
    """Pad ``G`` to ``K`` atoms by splitting its heaviest atom (with a tiny offset)."""
    w = list(G.weights)
    t1 = [row for row in G.theta1]
    t2 = [row for row in G.theta2]
    while len(w) < K:
        j = int(np.argmax(w))
        w[j] /= 2
        w.append(w[j])
        t1.append(t1[j] + 1e-3)
        t2.append(t2[j])
    return MixingMeasure(w, np.array(t1), np.array(t2))


def reference_curve(n, exponent: float) -> np.ndarray:
    n = np.asarray(n, float)
    return (np.log(n) / n) ** exponent


def run_rate_curve(spec: ExperimentSpec) -> ExperimentResult:
    """EM estimation error against ``n`` with a log-log slope.

    ``setting='exact'`` fits ``K = k0`` atoms and records ``W1``;
    ``setting='overfit'`` fits ``K = k0 + 1`` (or ``options['K']``) and records ``W2``.
    """
    o = spec.options
    setting = o.get("setting", "exact")
    if setting not in ("exact", "overfit"):
        raise ExperimentError("setting must be 'exact' or 'overfit'")
    k0 = spec.truth.K
    K = o.get("K") or (k0 if setting == "exact" else k0 + 1)
    if (setting == "exact") != (K == k0):
        raise ExperimentError(f"setting {setting!r} is inconsistent with K={K}, k0={k0}")
    r = 1 if setting == "exact" else 2
    metric = f"W{r}"
    jobs, keys = [], []
    for a, n in enumerate(spec.n_grid):
        for b in range(spec.replicates):
            ss = np.random.SeedSequence([spec.seed, a, b]).spawn(2)
            data_seed = int(ss[0].generate_state(1)[0])
            fit_seed = int(ss[1].generate_state(1)[0])
            jobs.append((spec.truth, spec.covariates, n, data_seed, fit_seed, K, r, o))
            keys.append((n, b))
    outs = _map(_rate_job, jobs, spec.workers)
    records = []
    for (n, b), out in zip(keys, outs):
        records.append({"n": n, "replicate": b, "metric": metric, "value": out["error"],
                        "failed": int("failure" in out)})
        if "error_truth_init" in out:
            records.append({"n": n, "replicate": b, "metric": metric + "_truth_init",
                            "value": out["error_truth_init"], "failed": int(not np.isfinite(out["error_truth_init"]))})
    summary = _curve_summary(records, metric, spec.n_grid, reference_exponent=0.5 if r == 1 else 0.25)
    summary.update({"setting": setting, "K": K, "k0": k0, "r": r})
    if o.get("truth_init_arm"):
        tr = {(rec["n"], rec["replicate"]): rec["value"] for rec in records if rec["metric"] == metric + "_truth_init"}
        ra = {(rec["n"], rec["replicate"]): rec["value"] for rec in records if rec["metric"] == metric}
        summary["truth_init_not_worse"] = {
            str(n): int(sum(tr[(n, b)] <= ra[(n, b)] + 1e-12 for b in range(spec.replicates))) for n in spec.n_grid
        }
    failures = [{"n": n, "replicate": b, "reason": out["failure"]} for (n, b), out in zip(keys, outs) if "failure" in out]
    meta = _meta(spec, {"failures": failures, "n_grid_note": "desk-scale reconstruction of the sample-size grid"})
    return ExperimentResult(records, summary, meta)


def _curve_summary(records: list, metric: str, n_grid, reference_exponent: Optional[float]) -> dict:
    per_n = {}
    pts = []
    for n in n_grid:
        vals = np.array([r["value"] for r in records if r["n"] == n and r["metric"] == metric], float)
        b = _band(vals)
        b["failures"] = int(np.sum(~np.isfinite(vals)))
        if reference_exponent is not None:
            b["reference"] = float(reference_curve(n, reference_exponent))
        per_n[str(n)] = b
        if b["count"] and b["mean"] > 0:
            pts.append((n, b["mean"]))
    out = {"metric": metric, "per_n": per_n}
    if len(pts) >= 3:
        s, c, r2 = fit_loglog_slope(pts)
        out.update({"slope": s, "intercept": c, "r2": r2})
    else:
        out.update({"slope": None, "intercept": None, "r2": None})
    return out


# ---------------------------------------------------------------------------
# posterior contraction


def _contraction_job(args):
    truth, px, n, data_seed, chain_seed, o = args
    data = truth.simulate(px, n, data_seed)
    prior = PriorSpec(eta_shape=o["eta_shape"], eta_rate=o["eta_rate"],
                      eta_bounds=None if o.get("eta_bounds") is None else tuple(o["eta_bounds"]))
    cfg = MCMCConfig(o["iterations"], o["burn_in"], proposal_cov=o["proposal_cov"], seed=chain_seed)
    try:
        chain = run_gibbs(cfg, prior, data, ModelShape.of(truth), truth.K)
        pw = posterior_w1(chain, truth.G)
    except (MCMCError, ModelError, ValueError) as exc:
        return {"failure": str(exc)}
    return {
        "mean_w1": pw.mean,
        "q25": pw.q25,
        "q75": pw.q75,
        "accept_theta": float(np.mean(chain.acceptance_theta)),
        "accept_eta": float(np.mean(chain.acceptance_eta)) if chain.acceptance_eta is not None else None,
    }


def run_posterior_contraction(spec: ExperimentSpec) -> ExperimentResult:
    """Posterior mean ``W1`` to the truth across sample sizes and replicates.

    Replicate ``b`` shares its seed stream across the ``n`` grid only through
    ``(seed, n index, b)``, so the same ``b`` at two sizes forms a paired run.
    """
    o = spec.options
    jobs, keys = [], []
    for a, n in enumerate(spec.n_grid):
        for b in range(spec.replicates):
            ss = np.random.SeedSequence([spec.seed, a, b]).spawn(2)
            jobs.append((spec.truth, spec.covariates, n, int(ss[0].generate_state(1)[0]),
                         int(ss[1].generate_state(1)[0]), o))
            keys.append((n, b))
    outs = _map(_contraction_job, jobs, spec.workers)
    records = []
    for (n, b), out in zip(keys, outs):
        failed = int("failure" in out)
        for m in ("mean_w1", "accept_theta", "accept_eta"):
            records.append({"n": n, "replicate": b, "metric": m, "value": out.get(m, float("nan")), "failed": failed})
    summary = _curve_summary(records, "mean_w1", spec.n_grid, None)
    summary["reference_inverse_log_n"] = {str(n): 1.0 / np.log(n) for n in spec.n_grid}
    table = {(r["n"], r["replicate"]): r["value"] for r in records if r["metric"] == "mean_w1"}
    reps = range(spec.replicates)
    if len(spec.n_grid) >= 2:
        n_prev, n_last = spec.n_grid[-2], spec.n_grid[-1]
        ratios = [table[(n_last, b)] / table[(n_prev, b)] for b in reps]
        summary["paired_ratio"] = {
            "n_pair": [n_prev, n_last],
            "ratios": ratios,
            "count_ge_half": int(sum(np.isfinite(q) and q >= 0.5 for q in ratios)),
        }
        summary["decreasing_replicates"] = int(sum(
            all(table[(a, b)] > table[(c, b)] for a, c in zip(spec.n_grid, spec.n_grid[1:])) for b in reps
        ))
    acc = {m: [r["value"] for r in records if r["metric"] == m] for m in ("accept_theta", "accept_eta")}
    summary["acceptance"] = {m: {"min": float(np.nanmin(v)), "max": float(np.nanmax(v))} for m, v in acc.items()}
    failures = [{"n": n, "replicate": b, "reason": out["failure"]} for (n, b), out in zip(keys, outs) if "failure" in out]
    return ExperimentResult(records, summary, _meta(spec, {"failures": failures}))


# ---------------------------------------------------------------------------
# subsample stability


def _nb_fit(truth: MixtureRegressionModel, data: Dataset, init: MixingMeasure, o: dict) -> MixingMeasure:
    cfg = EMConfig(truth.K, max_iter=o["max_iter"], m_step=o["m_step"], nu=o["nu"], init=init)
    return fit(cfg, data, ModelShape.of(truth)).G_hat


def _subsample_job(args):
    truth, data, init, G_ref, size, seed, o = args
    # nested design: one permutation per (arm, replicate), truncated to each size
    perm = np.random.default_rng(seed).permutation(data.n)
    idx = np.sort(perm[:size])
    try:
        G = _nb_fit(truth, data.subset(idx), init, o)
        return wasserstein_distance(G, G_ref, 1)
    except (EMError, ModelError, ValueError):
        return float("nan")


def run_subsample_stability(spec: ExperimentSpec, full_data: Optional[Dataset] = None) -> ExperimentResult:
    """Distance of subsample fits to the full-data fit, unrestricted and band-restricted.

    Without ``full_data`` a synthetic dataset of ``options['full_n']`` rows is
    simulated from the truth. All fits (full and subsample) start from the
    truth's measure with the dispersions held fixed, so a subsample equal to
    the full data reproduces the reference fit exactly. The band arm keeps the
    rows with ``|mu_1/phi_1 - mu_2/phi_2| <= band`` under the full-data fit.
    Within a replicate the subsamples are nested: one random permutation of
    the arm's rows is truncated to each size.
    """
    o = spec.options
    truth = spec.truth
    if truth.kernel.name != "negbin" or truth.K != 2:
        raise ExperimentError("subsample stability needs a 2-component negative binomial truth")
    if full_data is None:
        full_data = truth.simulate(spec.covariates, int(o["full_n"]), replicate_seed(spec.seed, FULL_DATA_STREAM, 0))
    init = truth.G
    G_full = _nb_fit(truth, full_data, init, o)
    gap = nb_pathology_gap(truth.with_measure(G_full), data=full_data, band=o["band"])
    arms = {"all": full_data, "band": full_data.subset(np.flatnonzero(gap["within_band"]))}
    for name, d in arms.items():
        if spec.n_grid[-1] > d.n:
            raise ExperimentError(f"subsample size {spec.n_grid[-1]} exceeds the {d.n} rows of arm {name!r}")
    jobs, keys = [], []
    for arm_i, (name, d) in enumerate(arms.items()):
        for a, n in enumerate(spec.n_grid):
            for b in range(spec.replicates):
                # subsamples are nested across n within a replicate
                jobs.append((truth, d, init, G_full, n, replicate_seed(spec.seed, arm_i, b), o))
                keys.append((name, n, b))
    outs = _map(_subsample_job, jobs, spec.workers)
    records = [{"arm": name, "n": n, "replicate": b, "metric": "W1", "value": v, "failed": int(not np.isfinite(v))}
               for (name, n, b), v in zip(keys, outs)]
    summary = {"full_fit": G_full.to_dict(), "full_n": full_data.n, "band": o["band"],
               "band_rows": arms["band"].n,
               "gap": {k: gap[k] for k in ("mean", "sd", "fraction_within_band")}}
    for name in arms:
        recs = [r for r in records if r["arm"] == name]
        s = _curve_summary(recs, "W1", spec.n_grid, None)
        for n in spec.n_grid:
            s["per_n"][str(n)]["reference"] = float(n ** -0.5)
        summary[name] = s
    table = {(r["arm"], r["n"], r["replicate"]): r["value"] for r in records}
    reps = range(spec.replicates)
    grid = spec.n_grid
    summary["all_decreasing_replicates"] = int(sum(
        all(table[("all", a, b)] > table[("all", c, b)] for a, c in zip(grid, grid[1:])) for b in reps
    ))
    summary["band_not_smaller"] = {
        str(n): int(sum(table[("band", n, b)] >= table[("all", n, b)] for b in reps)) for n in grid
    }
    return ExperimentResult(records, summary, _meta(spec, {"full_data_rows": full_data.n}))


def worker_count(flag: Optional[int] = None) -> int:
    """Pool size: explicit flag, else ``REGMIX_THREADS``, else the CPU count."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("REGMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ExperimentError("REGMIX_THREADS must be an integer") from None
    return os.cpu_count() or 1
