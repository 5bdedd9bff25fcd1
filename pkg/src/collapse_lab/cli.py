"""Command line entry point: ``collapse-lab {train,theory,verify,report}``.

Configs are TOML files::

    [data]
    n_c = 3
    s_c = 400
    L = 15
    K = 1000
    distribution = "uniform"   # or "zipf", or a list of s_c positive weights
    seed = 0

    [train]
    kind = "plain"             # "plain", "layernorm" or "both"
    d = 100
    lam = 0.001
    learning_rate = 0.1
    batch_size = 100
    n_spl = 5
    max_epochs = 500
    n_test = 20

    [theory]
    d = 100
    lam = 0.001
    types = ["I", "II", "III"]

    [verify]
    d = 5
    lam = 0.001
    n_fd = 20

Exit codes: 0 success, 1 check failure, 2 invalid input, 3 theory precondition violated.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

log = logging.getLogger("collapse_lab")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_THEORY = 0, 1, 2, 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class InputError(Exception):
    """Invalid configuration or unreadable input file (exit code 2)."""


# ------------------------------------------------------------------ output


def _fmt(x, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, bool) or x is None:
        return {True: "true", False: "false", None: "null"}[x]
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x) or math.isinf(x):
            return "null"
        s = f"{x:.17g}"
        return s if any(ch in s for ch in ".en") else s + ".0"
    if isinstance(x, str):
        import json

        return json.dumps(x)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{_fmt(str(k), indent, level + 1)}: {_fmt(v, indent, level + 1)}" for k, v in x.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, (list, tuple)):
        if not x:
            return "[]"
        if all(isinstance(v, (int, float)) for v in x):
            return "[" + ", ".join(_fmt(v, indent, level) for v in x) + "]"
        return "[\n" + ",\n".join(pad + _fmt(v, indent, level + 1) for v in x) + "\n" + end + "]"
    if hasattr(x, "tolist"):  # numpy scalars and arrays
        return _fmt(x.tolist(), indent, level)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps17(obj, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits (NaN/inf become null)."""
    return _fmt(obj, indent, 0) + "\n"


def write_json(path: Path, payload: dict) -> None:
    """Write payload plus a ``metadata`` field, the only place a timestamp appears."""
    from . import __version__

    out = dict(payload)
    out["metadata"] = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__}
    path.write_text(dumps17(out))


# ------------------------------------------------------------------ config


@dataclass
class ExperimentSpec:
    data: dict
    train: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    out: Path = Path("out")
    seed: int = 0

    def data_config(self, lam: float = 0.0):
        from .data_model import DataModelConfig, DataModelError

        d = self.data
        try:
            return DataModelConfig.make(int(d["n_c"]), int(d["s_c"]), int(d["L"]), int(d["K"]),
                                        d.get("distribution", "uniform"), lam)
        except KeyError as e:
            raise InputError(f"[data] is missing key {e.args[0]!r}") from None
        except (DataModelError, ValueError, TypeError) as e:
            raise InputError(f"invalid [data] section: {e}") from None


def load_spec(path, out=None, seed=None) -> ExperimentSpec:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib

    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise InputError(f"cannot read config {path}: {e}") from None
    if "data" not in raw:
        raise InputError("config has no [data] section")
    base_seed = raw["data"].get("seed")
    if seed is None and base_seed is None:
        raise InputError("no seed given: set [data] seed or pass --seed")
    spec = ExperimentSpec(
        data=raw["data"], train=raw.get("train", {}), theory=raw.get("theory", {}), verify=raw.get("verify", {}),
        out=Path(out) if out is not None else Path(raw.get("out", "out")),
        seed=int(seed if seed is not None else base_seed),
    )
    try:
        spec.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"output directory {spec.out} is not writable: {e}") from None
    if not os.access(spec.out, os.W_OK):
        raise InputError(f"output directory {spec.out} is not writable")
    return spec


def _kinds(name: str):
    if name not in ("plain", "layernorm", "both"):
        raise InputError(f"[train] kind must be plain, layernorm or both, not {name!r}")
    return ["plain", "layernorm"] if name == "both" else [name]


def _latents(spec: ExperimentSpec, config):
    import numpy as np

    from .data_model import DataModelError, full_latent_set, sample_latents

    if config.K == config.n_latent and spec.data.get("full", True):
        return full_latent_set(config.n_c, config.L)
    try:
        return sample_latents(config, np.random.default_rng([spec.seed, 0]))
    except DataModelError as e:
        raise InputError(str(e)) from None


# ---------------------------------------------------------------- commands


def _theory_params(spec, section: dict, config):
    from .theory import TheoryParams

    d = int(section.get("d", spec.train.get("d", 100)))
    lam = float(section.get("lam", spec.train.get("lam", 0.001)))
    return TheoryParams(config.n_c, config.s_c, config.L, config.K, d, lam, config.mu)


def _is_uniform(mu) -> bool:
    import numpy as np

    return bool(np.allclose(mu, mu[0]))


def cmd_train(spec: ExperimentSpec) -> int:
    import numpy as np

    from .diagnostics import collapse_report, compare_to_theory, write_word_csv
    from .network import NetworkKind, save_weights
    from .theory import TheoryError, minimize_H, minimize_Hstar
    from .trainer import DivergedError, TrainConfig, evaluate_accuracy, make_dataset, sgd_train, write_history_csv

    t = spec.train
    config = spec.data_config()
    try:
        tc = TrainConfig(
            n_spl=int(t.get("n_spl", 5)), batch_size=int(t.get("batch_size", 100)),
            learning_rate=float(t.get("learning_rate", 0.1)), lam=float(t.get("lam", 0.001)),
            max_epochs=int(t.get("max_epochs", 500)), plateau_tol=float(t.get("plateau_tol", 1e-6)),
            seed=spec.seed, d=int(t.get("d", 100)), layernorm_epsilon=float(t.get("layernorm_epsilon", 1e-8)),
        )
    except (ValueError, TypeError) as e:
        raise InputError(f"invalid [train] section: {e}") from None
    n_test = int(t.get("n_test", 20))
    latents = _latents(spec, config)
    dataset = make_dataset(latents, config, tc.n_spl, np.random.default_rng([spec.seed, 1]))
    if t.get("export_dataset", False):
        dataset.to_csv(spec.out / "dataset.csv")
    params = _theory_params(spec, t, config)
    report: dict = {"seed": spec.seed, "n_train": len(dataset), "runs": {}}
    for name in _kinds(t.get("kind", "plain")):
        kind = NetworkKind(name, tc.layernorm_epsilon if name == "layernorm" else 0.0)
        log.info("training %s on %d sentences", name, len(dataset))
        try:
            result = sgd_train(kind, dataset, tc, n_w=config.n_w, K=config.K)
        except DivergedError as e:
            log.error("%s training diverged: %s", name, e)
            return EXIT_CHECK
        acc = evaluate_accuracy(kind, result.weights, latents, config, n_test, np.random.default_rng([spec.seed, 2]))
        save_weights(spec.out / f"weights_{name}.bin", result.weights, kind)
        write_history_csv(spec.out / f"history_{name}.csv", result.history, acc)
        layernorm = kind.is_layernorm
        rep = collapse_report(result.weights, latents.concepts, config.n_c, config.s_c)
        write_word_csv(spec.out / f"words_{name}.csv", result.weights.W, config.s_c)
        run = {"test_acc": acc, "final_train_risk": result.history[-1] if result.history else None,
               "epochs": result.epochs, "converged": result.converged, "collapse": rep.to_dict()}
        if _is_uniform(config.mu):
            try:
                pred = minimize_Hstar(params) if layernorm else minimize_H(params)
                tol = float(t.get("norm_tol", 0.15))
                checks = {"u_norm_mean": ("predicted_norm" if layernorm else "c_prime", tol)}
                if not layernorm:
                    checks["embedding_norm_mean"] = ("predicted_norm", tol)
                run["theory"] = pred.to_dict()
                run["comparison"] = [vars(c) for c in compare_to_theory(rep, pred, checks)]
            except TheoryError as e:
                run["theory"] = {"skipped": str(e)}
        else:
            run["theory"] = {"skipped": "closed-form types I/II assume uniform word frequencies"}
        report["runs"][name] = run
        log.info("%s: test accuracy %.4f after %d epochs", name, acc, result.epochs)
    write_json(spec.out / "report.json", report)
    return EXIT_OK


def cmd_theory(spec: ExperimentSpec) -> int:
    from .theory import NoGuaranteeError, TheoryError, minimize_H, minimize_Hstar, solve_type3_system, uniqueness_bound

    config = spec.data_config()
    params = _theory_params(spec, spec.theory, config)
    types = [str(x).upper() for x in spec.theory.get("types", ["I", "II", "III"])]
    out: dict = {"params": {"n_c": params.n_c, "s_c": params.s_c, "L": params.L, "K": params.K,
                            "d": params.d, "lam": params.lam, "mu": params.mu}}
    try:
        if "I" in types:
            out["type_I"] = minimize_H(params).to_dict()
        if "II" in types:
            out["type_II"] = minimize_Hstar(params).to_dict()
        if "III" in types:
            out["uniqueness_bound"] = uniqueness_bound(params)
            sol = solve_type3_system(params)
            out["type_III"] = {"c": sol.c, "radii": sol.radii, "residual_radii": sol.residual_radii,
                               "residual_norm": sol.residual_norm}
    except NoGuaranteeError as e:
        log.error("%s", e)
        write_json(spec.out / "prediction.json", out)
        return EXIT_THEORY
    except TheoryError as e:
        raise InputError(str(e)) from None
    write_json(spec.out / "prediction.json", out)
    return EXIT_OK


def _fd_check(kind, weights, latents, params, rng, step=1e-5, n_coords=8):
    """Largest relative error between analytic and central-difference partial derivatives."""
    import numpy as np

    from .theory import exact_risk

    _, dW, dU = exact_risk(kind, weights, latents, params, with_grad=True)
    worst = 0.0
    for name, grad in (("W", dW), ("U", dU)):
        A = getattr(weights, name)
        for idx in zip(*(rng.integers(0, s, n_coords) for s in A.shape)):
            old = A[idx]
            A[idx] = old + step
            fp = exact_risk(kind, weights, latents, params)
            A[idx] = old - step
            fm = exact_risk(kind, weights, latents, params)
            A[idx] = old
            fd = (fp - fm) / (2 * step)
            worst = max(worst, abs(fd - grad[idx]) / max(1.0, abs(fd), abs(grad[idx])))
    return worst


def _load_matching_weights(path, config):
    from .network import WeightsFormatError, load_weights

    try:
        weights, kind = load_weights(path)
    except (OSError, WeightsFormatError) as e:
        raise InputError(f"cannot load weights {path}: {e}") from None
    if weights.n_w != config.n_w or weights.K != config.K or weights.L != config.L:
        raise InputError("weights do not match the [data] section")
    return weights, kind


def cmd_verify(spec: ExperimentSpec, weights_path=None) -> int:
    import numpy as np

    from .data_model import check_lemma_B_properties, check_symmetry_assumption
    from .network import LAYERNORM, PLAIN, NetworkKind, init_weights
    from .theory import (
        EnumerationBudgetError,
        build_collapse_config,
        closed_form_risk,
        equiangular_frame,
        exact_risk,
        exact_risk_gradient,
        solve_type3_system,
        uniqueness_bound,
    )

    v = spec.verify
    config = spec.data_config()
    if config.s_c**config.L * config.K > 10**6:
        raise InputError("verify needs a tiny instance (s_c**L * K <= 1e6)")
    latents = _latents(spec, config)
    params = _theory_params(spec, {"d": v.get("d", config.n_c + 2), "lam": v.get("lam", 0.001)}, config)
    rng = np.random.default_rng([spec.seed, 3])
    tol = {"fd": 1e-6, "closed_form": 1e-10, "gradient": 1e-8, "residual": 1e-10}
    checks: dict = {}

    sym = check_symmetry_assumption(latents, config)
    checks["symmetry"] = {"passed": sym.holds, "worst_violation": sym.worst_violation, "n_violations": sym.n_violations}
    lb = check_lemma_B_properties(latents)
    checks["neighbour_spheres"] = {"passed": lb.holds, "sphere_sizes": lb.sphere_sizes, "theta": lb.theta}

    worst = {}
    for name, kind in (("plain", PLAIN), ("layernorm", NetworkKind("layernorm", 1e-3))):
        errs = []
        for _ in range(int(v.get("n_fd", 4))):
            w = init_weights(params.d, config.n_w, config.K, config.L, rng)
            errs.append(_fd_check(kind, w, latents, params, rng))
        worst[name] = max(errs)
    if weights_path is not None:
        w, kind = _load_matching_weights(weights_path, config)
        params = _theory_params(spec, {"d": w.d, "lam": params.lam}, config)
        worst["loaded"] = _fd_check(kind, w, latents, params, rng)
    checks["finite_difference"] = {"passed": max(worst.values()) <= tol["fd"], "max_rel_error": worst}

    if sym.holds and _is_uniform(config.mu):
        frame = equiangular_frame(config.n_c, params.d, mean_zero=True)
        devs = []
        for kind_name, kind in (("I", PLAIN), ("II", LAYERNORM)):
            for c in np.linspace(0.0, 3.0, 20):
                w = build_collapse_config(kind_name, frame, latents, params, c=float(c))
                devs.append(abs(closed_form_risk(kind_name, float(c), params) - exact_risk(kind, w, latents, params)))
        checks["closed_form"] = {"passed": max(devs) <= tol["closed_form"], "max_abs_dev": max(devs)}
    else:
        checks["closed_form"] = {"skipped": "needs symmetric latents and uniform frequencies"}

    if sym.holds and config.K == config.n_latent and uniqueness_bound(params):
        sol = solve_type3_system(params)
        frame = equiangular_frame(config.n_c, params.d)
        w = build_collapse_config("III", frame, latents, params, c=sol.c, radii=sol.radii)
        dW, dU = exact_risk_gradient(PLAIN, w, latents, params)
        gnorm = float(np.sqrt(np.sum(dW**2) + np.sum(dU**2)))
        ok = gnorm <= tol["gradient"] and sol.residual_radii <= tol["residual"] and sol.residual_norm <= tol["residual"]
        checks["criticality"] = {"passed": bool(ok), "gradient_norm": gnorm, "residual_radii": sol.residual_radii,
                                 "residual_norm": sol.residual_norm, "c": sol.c, "radii": sol.radii}
    else:
        checks["criticality"] = {"skipped": "needs the full latent set and lambda inside the uniqueness bound"}

    failed = [k for k, c in checks.items() if c.get("passed") is False]
    write_json(spec.out / "verify.json", {"tolerances": tol, "checks": checks, "failed": failed})
    for k, c in checks.items():
        status = "skip" if "skipped" in c else ("PASS" if c["passed"] else "FAIL")
        print(f"{status:4s} {k}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_report(spec: ExperimentSpec, weights_path) -> int:
    from .diagnostics import collapse_report, write_word_csv

    config = spec.data_config()
    weights, kind = _load_matching_weights(weights_path, config)
    latents = _latents(spec, config)
    rep = collapse_report(weights, latents.concepts, config.n_c, config.s_c, layernorm=False)
    out = {"kind": kind.variant.value, "collapse": rep.to_dict()}
    if kind.is_layernorm:
        out["collapse_layernorm"] = collapse_report(weights, latents.concepts, config.n_c, config.s_c,
                                                    layernorm=True).to_dict()
    write_word_csv(spec.out / "words.csv", weights.W, config.s_c)
    write_json(spec.out / "collapse_report.json", out)
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapse-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "theory", "verify", "report"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML experiment config")
        s.add_argument("--out", help="output directory (default: config 'out' or ./out)")
        s.add_argument("--seed", type=int, help="overrides [data] seed")
        s.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
        if name in ("report", "verify"):
            s.add_argument("--weights", required=name == "report", help="weights file written by train")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("COLLAPSE_LAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    if "numpy" not in sys.modules:  # only effective before the BLAS library is loaded
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    try:
        spec = load_spec(args.config, args.out, args.seed)
        if args.command == "train":
            return cmd_train(spec)
        if args.command == "theory":
            return cmd_theory(spec)
        if args.command == "verify":
            return cmd_verify(spec, args.weights)
        return cmd_report(spec, args.weights)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
