"""``regmix`` command line.

Exit codes: 0 success, 1 validation error (a JSON object with an ``error``
code on standard error), 2 runtime failure. Statistical knobs are read from
the shipped template for each subcommand, then from ``--config``, then from
explicit flags; the resolved values are written into every output's ``meta``
block.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._version import __version__
from .bayes import MCMCConfig, MCMCError, PriorSpec, run_gibbs
from .em import EMConfig, EMError, ModelShape, fit
from .experiments import ExperimentError, run, spec_from_dict, worker_count
from .identifiability import IdentifiabilityError, check_model
from .kernels import KernelError, kernel_from_dict
from .links import LinkError, link_from_dict
from .measures import Box, MeasureError, MixingMeasure, wasserstein
from .model import (
    Dataset,
    MixtureRegressionModel,
    ModelError,
    Uniform,
    covariates_from_dict,
    expected_hellinger_sq,
    expected_total_variation,
    prediction_error,
)

STOCHASTIC = {"simulate", "fit-em", "fit-bayes", "distance", "experiment"}


class ValidationError(Exception):
    def __init__(self, code: str, message: str, **details):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details

    def payload(self) -> dict:
        out = {"error": self.code, "message": self.message}
        out.update(self.details)
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise ValidationError("usage", message, usage=self.format_usage().strip())


# ---------------------------------------------------------------------------
# loading helpers


def template(name: str) -> dict:
    """Shipped JSON template ``templates/<name>.json``."""
    try:
        text = resources.files("regmix").joinpath("templates", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ValidationError("unknown_template", f"no template named {name!r}") from None
    return json.loads(text)


def template_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("regmix").joinpath("templates").iterdir()
                  if p.name.endswith(".json"))


def _read_json(path: str, what: str) -> dict:
    if path.startswith("template:"):
        return template(path.split(":", 1)[1])
    p = Path(path)
    if not p.is_file():
        raise ValidationError("file_not_found", f"{what} file not found: {path}", path=path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError("invalid_json", f"{what} file is not valid JSON: {exc}", path=path) from None


def _read_data(path: str) -> Dataset:
    if not Path(path).is_file():
        raise ValidationError("file_not_found", f"data file not found: {path}", path=path)
    try:
        return Dataset.from_csv(path)
    except ModelError as exc:
        raise ValidationError("invalid_data", str(exc), path=path) from None


def _schema(fn, what: str):
    try:
        return fn()
    except (KeyError, TypeError, ValueError, ModelError, KernelError, LinkError, MeasureError) as exc:
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        raise ValidationError("invalid_" + what, f"invalid {what}: {msg}") from None


def load_model(d: dict) -> MixtureRegressionModel:
    if "measure" not in d:
        raise ValidationError("invalid_model", "model file needs a 'measure' block")
    return _schema(lambda: MixtureRegressionModel.from_dict(d), "model")


def load_shape(d: dict) -> ModelShape:
    def build():
        kernel = kernel_from_dict(d["kernel"])
        link1 = link_from_dict(d["link1"])
        link2 = link_from_dict(d["link2"]) if d.get("link2") else None
        disp = d.get("dispersion")
        if kernel.has_dispersion and link2 is None and disp is None:
            raise ModelError(f"{kernel.name} needs 'link2' or 'dispersion'")
        if not kernel.has_dispersion:
            link2, disp = None, None
        return ModelShape(kernel, link1, link2, None if disp is None else float(disp))

    return _schema(build, "model")


def _covariates(d: Optional[dict], flag: Optional[str]):
    spec = _read_json(flag, "covariates") if flag else d
    if spec is None:
        raise ValidationError("missing_parameter", "covariate distribution needed (model 'covariates' block or --covariates)")
    return _schema(lambda: covariates_from_dict(spec), "covariates")


def _merge(base: dict, config_path: Optional[str], flags: dict) -> dict:
    cfg = dict(base)
    if config_path:
        cfg.update(_read_json(config_path, "config"))
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _require(cfg: dict, keys: Sequence[str]) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError("missing_parameter", f"required parameter(s) not set: {', '.join(missing)}",
                              missing=missing)


def _seed(args) -> int:
    if args.seed is None:
        raise ValidationError("seed_required", f"{args.command} is stochastic; pass --seed")
    return int(args.seed)


def _meta(args, config: dict, seed: Optional[int], t0: float) -> dict:
    return {
        "tool": "regmix",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }


def _write_json(path: str, obj: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, MixingMeasure):
        return o.to_dict()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    model_d = _read_json(args.model, "model")
    model = load_model(model_d)
    px = _covariates(model_d.get("covariates"), args.covariates)
    cfg = _merge(template("simulate"), args.config, {"n": args.n})
    _require(cfg, ["n"])
    n = int(cfg["n"])
    if n < 1:
        raise ValidationError("invalid_parameter", "n must be >= 1")
    data = model.simulate(px, n, seed)
    config = {"model": model.to_dict(), "covariates": px.to_dict(), **cfg}
    meta = _meta(args, config, seed, t0)
    data.to_csv(args.out, comment="meta " + json.dumps(meta, sort_keys=True))
    return 0


def _em_box(shape: ModelShape, cfg: dict, shape_d: dict) -> Box:
    if shape_d.get("box"):
        return _schema(lambda: Box.from_dict(shape_d["box"]), "box")
    h = float(cfg["box_halfwidth"])
    d1 = shape.link1.param_dim
    d2 = shape.d2
    lo2, hi2 = cfg.get("theta2_range", [0.5, 5.0])
    return Box(np.full(d1, -h), np.full(d1, h), np.full(d2, float(lo2)), np.full(d2, float(hi2)))


def cmd_fit_em(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    data = _read_data(args.data)
    shape_d = _read_json(args.model, "model")
    shape = load_shape(shape_d)
    flags = {"k": args.k, "strategy": args.strategy, "epsilon": args.epsilon, "max_iter": args.max_iter,
             "restarts": args.restarts, "init": args.init, "nu": args.nu, "mode": args.mode}
    if args.no_backtracking:
        flags["backtracking"] = False
    cfg = _merge(template("fit-em"), args.config, flags)
    _require(cfg, ["k", "strategy", "epsilon", "max_iter", "restarts", "init"])
    init = cfg["init"]
    if isinstance(init, str) and init.endswith(".json"):
        init = _schema(lambda: MixingMeasure.from_dict(_read_json(cfg["init"], "initial measure")), "measure")
    eps = None if cfg["epsilon"] == "auto" else float(cfg["epsilon"])
    box = _em_box(shape, cfg, shape_d)
    econf = _schema(lambda: EMConfig(
        int(cfg["k"]), max_iter=int(cfg["max_iter"]), epsilon=eps, m_step=cfg["strategy"], nu=float(cfg["nu"]),
        backtracking=bool(cfg["backtracking"]), init=init, box=box, restarts=int(cfg["restarts"]), seed=seed,
        mode=cfg["mode"], update_dispersion=bool(cfg.get("update_dispersion", False)),
    ), "config")
    res = fit(econf, data, shape)
    config = {"resolved": econf.to_dict(), "epsilon_used": econf.resolved_epsilon(data.n), "template": cfg,
              "data": {"path": str(args.data), "n": data.n, "p": data.p}}
    _write_json(args.out, {"meta": _meta(args, config, seed, t0), "result": res.to_dict()})
    return 0


def cmd_fit_bayes(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    data = _read_data(args.data)
    shape = load_shape(_read_json(args.model, "model"))
    flags = {"k": args.k, "iterations": args.iters, "burn_in": args.burnin, "thin": args.thin,
             "proposal_cov": args.proposal_cov}
    cfg = _merge(template("fit-bayes"), args.config, flags)
    if args.prior:
        cfg["prior"] = {**cfg.get("prior", {}), **_read_json(args.prior, "prior")}
    _require(cfg, ["k", "iterations", "burn_in", "proposal_cov"])
    pr = cfg.get("prior", {})
    prior = _schema(lambda: PriorSpec(
        pr.get("concentration"), pr.get("theta_cov"), float(pr.get("eta_shape", 0.01)),
        float(pr.get("eta_rate", 0.01)), None if pr.get("eta_bounds") is None else tuple(pr["eta_bounds"]),
    ), "prior")
    mconf = _schema(lambda: MCMCConfig(
        int(cfg["iterations"]), int(cfg["burn_in"]), proposal_cov=cfg["proposal_cov"],
        eta_proposal_shape=float(cfg.get("eta_proposal_shape", 2.0)), seed=seed, thin=int(cfg.get("thin", 1)),
    ), "config")
    chain = run_gibbs(mconf, prior, data, shape, int(cfg["k"]))
    config = {"mcmc": mconf.to_dict(), "prior": prior.resolved(int(cfg["k"]), shape.link1.param_dim).to_dict(),
              "k": int(cfg["k"]), "data": {"path": str(args.data), "n": data.n, "p": data.p}}
    meta = _meta(args, config, seed, t0)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"meta": meta, "summary": chain.summary()}, sort_keys=True, default=_default) + "\n")
        for rec in chain.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def _measure_block(d):
    """Accept a bare measure or a model document carrying a ``measure`` block."""
    if isinstance(d, dict) and "atoms" not in d and isinstance(d.get("measure"), dict):
        return d["measure"]
    return d


def cmd_wasserstein(args) -> int:
    t0 = time.perf_counter()
    if args.r not in (1, 2):
        raise ValidationError("invalid_parameter", "--r must be 1 or 2")
    A = _schema(lambda: MixingMeasure.from_dict(_measure_block(_read_json(args.a, "measure"))), "measure")
    B = _schema(lambda: MixingMeasure.from_dict(_measure_block(_read_json(args.b, "measure"))), "measure")
    d, plan = _schema(lambda: wasserstein(A, B, args.r), "measure")
    print(format(d, ".15g"))
    if args.out:
        config = {"a": A.to_dict(), "b": B.to_dict(), "r": args.r}
        _write_json(args.out, {"meta": _meta(args, config, None, t0), "distance": d,
                               "plan": plan.q.tolist(), "cost": plan.cost})
    return 0


def cmd_distance(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    a_d = _read_json(args.a, "model")
    A, B = load_model(a_d), load_model(_read_json(args.b, "model"))
    px = _covariates(a_d.get("covariates"), args.covariates)
    cfg = _merge(template("distance"), args.config, {"kind": args.kind, "mc_points": args.mc_points, "r": args.r})
    kind = cfg["kind"]
    if kind == "tv":
        est = _schema(lambda: expected_total_variation(A, B, px, int(cfg["mc_points"]), seed), "model")
    elif kind == "hellinger":
        est = _schema(lambda: expected_hellinger_sq(A, B, px, int(cfg["mc_points"]), seed), "model")
    elif kind == "prediction":
        est = _schema(lambda: prediction_error(A.G, B.G, A.link1, A.link2, px, int(cfg["r"]),
                                               int(cfg["mc_points"]), seed), "model")
    else:
        raise ValidationError("invalid_parameter", f"unknown distance kind {kind!r}")
    out = {"kind": kind, "value": est.value, "stderr": est.stderr, "mc_points": est.n_points}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        config = {"a": A.to_dict(), "b": B.to_dict(), "covariates": px.to_dict(), **cfg}
        _write_json(args.out, {"meta": _meta(args, config, seed, t0), **out})
    return 0


def _grid(spec: Optional[str], what: str):
    if spec is None:
        return None
    try:
        lo, hi, n = spec.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise ValidationError("invalid_parameter", f"{what} must look like lo:hi:count, got {spec!r}") from None


def cmd_check_identifiability(args) -> int:
    t0 = time.perf_counter()
    model_d = _read_json(args.model, "model")
    model = load_model(model_d)
    cfg = _merge(template("check-identifiability"), args.config,
                 {"order": args.order, "threshold": args.threshold, "tol": args.tol})
    order = int(cfg["order"])
    if order not in (0, 1, 2):
        raise ValidationError("invalid_parameter", "--order must be 0, 1 or 2")
    xg = _grid(args.x_grid, "--x-grid")
    if xg is None:
        cov = model_d.get("covariates")
        px = _covariates(cov, None) if cov else None
        if not isinstance(px, Uniform) or px.p != 1:
            raise ValidationError("missing_parameter", "--x-grid needed (no univariate uniform covariates in model)")
        xg = np.linspace(px.lo[0], px.hi[0], int(cfg["x_points"]))
    yg = _grid(args.y_grid, "--y-grid")
    rep = _schema(lambda: check_model(model, order, xg, yg, float(cfg["threshold"]), float(cfg["tol"])), "model")
    body = rep.to_dict()
    print(json.dumps({"order_claimed": body["order_claimed"], "rule_fired": body["rule_fired"],
                      "relative_singular_value": body["relative_singular_value"]}, sort_keys=True))
    if args.report:
        config = {"model": model.to_dict(), "x_grid": [float(xg[0]), float(xg[-1]), int(xg.size)],
                  "y_grid": None if yg is None else [float(yg[0]), float(yg[-1]), int(yg.size)], **cfg}
        _write_json(args.report, {"meta": _meta(args, config, None, t0), "report": body})
    return 0


def cmd_experiment(args) -> int:
    t0 = time.perf_counter()
    spec_d = _read_json(args.spec, "spec")
    if args.seed is not None:
        spec_d["seed"] = int(args.seed)
    if spec_d.get("seed") is None:
        raise ValidationError("seed_required", "experiment specs need a seed (spec 'seed' field or --seed)")
    try:
        workers = worker_count(args.workers)
        spec_d["workers"] = workers
        spec = spec_from_dict(spec_d)
    except ExperimentError as exc:
        raise ValidationError("invalid_spec", str(exc)) from None
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise ValidationError("invalid_spec", f"invalid spec: {exc}") from None
    data = _read_data(args.data) if args.data else None
    try:
        result = run(spec, data)
    except ExperimentError as exc:
        raise ValidationError("invalid_spec", str(exc)) from None
    meta = _meta(args, result.meta, spec.seed, t0)
    result.meta = meta
    result.summary = {**result.summary, "meta": meta}
    result.write(args.out)
    csv_path = Path(args.out) / "records.csv"
    csv_path.write_text("# meta " + json.dumps(meta, sort_keys=True, default=_default) + "\n" + csv_path.read_text())
    print(json.dumps({"out": str(args.out), "records": len(result.records)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regmix", description="Mixtures of regression models: simulation, fitting, distances and diagnostics.")
    p.add_argument("--version", action="version", version=f"regmix {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    s = sub.add_parser("simulate", help="draw a dataset from a model with a mixing measure")
    s.add_argument("--model", required=True, help="model JSON (kernel, links, measure, covariates)")
    s.add_argument("--n", type=int, help="number of rows")
    s.add_argument("--covariates", help="covariate distribution JSON (overrides the model's block)")
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="JSON config file or template:<name>")
    s.add_argument("--out", required=True, help="output CSV (x1..xp,y)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-em", help="maximum likelihood fit by EM")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="model shape JSON (kernel, links, optional box)")
    s.add_argument("--k", type=int, help="number of components to fit")
    s.add_argument("--strategy", choices=["closed_form", "em1", "gradient"])
    s.add_argument("--epsilon", help="stopping threshold on the log-likelihood increase, or 'auto' (1e-8 n)")
    s.add_argument("--max-iter", type=int, dest="max_iter")
    s.add_argument("--restarts", type=int)
    s.add_argument("--init", help="random_from_box, kmeans_on_y or a measure JSON path")
    s.add_argument("--nu", type=float, help="gradient step size")
    s.add_argument("--mode", choices=["exact", "overfit"])
    s.add_argument("--no-backtracking", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="JSON config file or template:<name>")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_em)

    s = sub.add_parser("fit-bayes", help="Gibbs sampler with Metropolis-Hastings moves")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--burnin", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--proposal-cov", type=float, dest="proposal_cov")
    s.add_argument("--prior", help="prior JSON (concentration, theta_cov, eta_shape, eta_rate, eta_bounds)")
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="JSON config file or template:<name>")
    s.add_argument("--out", required=True, help="JSON-lines chain file")
    s.set_defaults(func=cmd_fit_bayes)

    s = sub.add_parser("wasserstein", help="exact Wasserstein distance between two mixing measures")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--r", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_wasserstein)

    s = sub.add_parser("distance", help="expected TV / Hellinger / prediction distance between two models")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--kind", choices=["tv", "hellinger", "prediction"])
    s.add_argument("--mc-points", type=int, dest="mc_points")
    s.add_argument("--r", type=int)
    s.add_argument("--covariates")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_distance)

    s = sub.add_parser("check-identifiability", help="rule-based and numeric strong identifiability check")
    s.add_argument("--model", required=True)
    s.add_argument("--order", type=int)
    s.add_argument("--x-grid", dest="x_grid", help="lo:hi:count")
    s.add_argument("--y-grid", dest="y_grid", help="lo:hi:count (default: derived from the model)")
    s.add_argument("--threshold", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--config")
    s.add_argument("--report")
    s.set_defaults(func=cmd_check_identifiability)

    s = sub.add_parser("experiment", help="run a simulation study")
    s.add_argument("--spec", required=True, help="spec JSON or template:<name>")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--data", help="dataset CSV (subsample_stability only)")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, help="worker processes (default: REGMIX_THREADS or CPU count)")
    s.set_defaults(func=cmd_experiment)
    return p


def _fail(code: int, payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ValidationError("usage", "a subcommand is required", commands=sorted(
                ["simulate", "fit-em", "fit-bayes", "wasserstein", "distance", "check-identifiability", "experiment"]))
        return args.func(args)
    except ValidationError as exc:
        return _fail(1, exc.payload())
    except (EMError, MCMCError, ModelError, IdentifiabilityError, ExperimentError, ArithmeticError,
            np.linalg.LinAlgError, OSError, ValueError) as exc:
        return _fail(2, {"error": "runtime_failure", "type": type(exc).__name__, "message": str(exc)})


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
