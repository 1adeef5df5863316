"""Command-line interface: denoising runs, weight learning, sweeps.

Configuration is a flat key=value file with dotted keys (solver.gamma=100),
overridable on the command line with --set key=value. All CSV outputs embed
the package version, a hash of the resolved configuration and the seed, so
identical (config, seed) runs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import bilevel as bl
from . import fidelity as fid
from . import imageio
from . import phantoms
from . import state_solver as ss
from .adjoint import kkt_residuals
from .grid import ImageGrid
from .regularizer import HuberParams

DEFAULTS = {
    "model": "gaussian",
    "seed": "0",
    "solver.gamma": "100.0",
    "solver.g_cap": "1.0",
    "solver.variant": "max",
    "solver.epsilon": "1e-12",
    "solver.tol": "1e-8",
    "solver.max_ssn": "100",
    "solver.boundary": "dirichlet",
    "solver.u_floor": "1e-6",
    "bilevel.beta": "1e-10",
    "bilevel.alpha": "0.5",
    "bilevel.grad_mode": "forward_fd",
    "bilevel.fd_step": "1e-3",
    "bilevel.tol_grad": "1e-9",
    "bilevel.tol_cost": "1e-11",
    "bilevel.max_iter": "60",
    "bilevel.lambda0": "",
    "noise.kind": "gaussian",
    "noise.mean": "0.0",
    "noise.variance": "0.002",
    "noise.scale": "100.0",
    "noise.density": "0.1",
}

MODELS = {
    "gaussian": (fid.GAUSSIAN,),
    "gausspoisson": (fid.GAUSSIAN, fid.POISSON),
    "impulse": (fid.IMPULSE,),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_settings(config_path=None, overrides=()):
    settings = dict(DEFAULTS)
    if config_path:
        for line in Path(config_path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in settings:
                raise UsageError(f"unknown config key: {key!r}")
            settings[key] = value.strip()
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in settings:
            raise UsageError(f"unknown config key: {key!r}")
        settings[key] = value
    return settings


def config_hash(settings):
    blob = "\n".join(f"{k}={settings[k]}" for k in sorted(settings))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_solver(settings):
    return ss.SolverConfig(
        epsilon=float(settings["solver.epsilon"]),
        huber=HuberParams(float(settings["solver.gamma"]),
                          float(settings["solver.g_cap"]),
                          settings["solver.variant"]),
        tol_ssn=float(settings["solver.tol"]),
        max_ssn=int(settings["solver.max_ssn"]),
        boundary=settings["solver.boundary"],
        u_floor=float(settings["solver.u_floor"]),
    )


def build_bilevel(settings):
    lam0 = settings["bilevel.lambda0"]
    return bl.BilevelConfig(
        beta=float(settings["bilevel.beta"]),
        alpha=float(settings["bilevel.alpha"]),
        grad_mode=settings["bilevel.grad_mode"],
        fd_step=float(settings["bilevel.fd_step"]),
        tol_grad=float(settings["bilevel.tol_grad"]),
        tol_cost=float(settings["bilevel.tol_cost"]),
        max_iter=int(settings["bilevel.max_iter"]),
        lambda0=np.array([float(x) for x in lam0.split(",")])
        if lam0 else None,
    )


def write_csv(path, fieldnames, rows, settings):
    lines = [f"# tvlearn={__version__}",
             f"# config={config_hash(settings)}",
             f"# seed={settings['seed']}",
             ",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(_fmt(row[name]) for name in fieldnames))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_input(args, settings):
    """Resolve the working image: a file or a bundled phantom."""
    if getattr(args, "input", None):
        return imageio.read_image(args.input)
    if getattr(args, "phantom", None):
        return phantoms.phantom(args.phantom)
    raise UsageError("provide --input or --phantom")


def make_noisy(truth: ImageGrid, settings):
    kind = settings["noise.kind"]
    return phantoms.add_noise(
        truth, kind, int(settings["seed"]),
        mean=float(settings["noise.mean"]),
        variance=float(settings["noise.variance"]),
        scale=float(settings["noise.scale"]),
        density=float(settings["noise.density"]))


def _problem(noisy, truth, settings):
    kinds = MODELS.get(settings["model"])
    if kinds is None:
        raise UsageError(f"unknown model {settings['model']!r}")
    return bl.DenoiseProblem(noisy, truth, kinds, build_solver(settings))


def _learn_rows(trace):
    d = len(trace.lambdas[0])
    names = ["iteration"] + [f"lambda_{i}" for i in range(d)] + \
        ["cost", "grad_norm", "ssn_iterations"]
    rows = []
    for k in range(trace.iterations):
        row = {"iteration": k, "cost": float(trace.costs[k]),
               "grad_norm": float(trace.grad_norms[k]),
               "ssn_iterations": trace.ssn_iterations[k]}
        for i in range(d):
            row[f"lambda_{i}"] = float(trace.lambdas[k][i])
        rows.append(row)
    return names, rows


def cmd_noise(args, settings):
    truth = load_input(args, settings)
    noisy = make_noisy(truth, settings)
    imageio.write_image(noisy, args.output)
    return 0


def cmd_denoise(args, settings):
    noisy = load_input(args, settings)
    lams = [float(x) for x in args.lam.split(",")]
    kinds = MODELS.get(settings["model"])
    if kinds is None or len(lams) != len(kinds):
        raise UsageError("--lambda must match the model's weight count")
    problem = bl.DenoiseProblem(noisy, noisy, kinds, build_solver(settings))
    u, trace = problem.solve(np.array(lams))
    imageio.write_image(u, args.output)
    if args.trace:
        rows = [{"iteration": k, "residual": float(r)}
                for k, r in enumerate(trace.residuals)]
        write_csv(args.trace, ["iteration", "residual"], rows, settings)
    return 0


def _run_learn(problem, settings, args):
    cfg = build_bilevel(settings)
    lam, trace, data, u_star = bl.learn_weights(problem, cfg)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    names, rows = _learn_rows(trace)
    write_csv(outdir / "trace.csv", names, rows, settings)
    stat, compl, feas = trace.kkt
    summary = [{"name": f"lambda_{i}", "value": float(v)}
               for i, v in enumerate(lam)]
    summary += [{"name": "cost", "value": float(trace.costs[-1])},
                {"name": "kkt_stationarity", "value": stat},
                {"name": "kkt_complementarity", "value": compl},
                {"name": "kkt_feasibility", "value": feas},
                {"name": "converged", "value": int(trace.converged)}]
    write_csv(outdir / "result.csv", ["name", "value"], summary, settings)
    imageio.write_image(u_star, outdir / "denoised.png")
    return lam, trace


def cmd_learn(args, settings):
    truth = load_input(args, settings)
    noisy = imageio.read_image(args.noisy) if args.noisy \
        else make_noisy(truth, settings)
    problem = _problem(noisy, truth, settings)
    lam, trace = _run_learn(problem, settings, args)
    print("lambda* =", " ".join(repr(float(v)) for v in lam))
    return 0


def cmd_train(args, settings):
    pairs = []
    for spec in args.pair:
        try:
            noisy_path, truth_path = spec.split(":")
        except ValueError:
            raise UsageError("--pair expects noisy:truth") from None
        pairs.append((imageio.read_image(noisy_path),
                      imageio.read_image(truth_path)))
    kinds = MODELS.get(settings["model"])
    if kinds is None:
        raise UsageError(f"unknown model {settings['model']!r}")
    lam, trace = bl.train_on_set(pairs, kinds, build_solver(settings),
                                 build_bilevel(settings))
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    names, rows = _learn_rows(trace)
    write_csv(outdir / "trace.csv", names, rows, settings)
    print("lambda* =", " ".join(repr(float(v)) for v in lam))
    return 0


def cmd_gradcheck(args, settings):
    truth = load_input(args, settings)
    noisy = make_noisy(truth, settings)
    # the adjoint requires the differentiable TV smoothing end to end
    settings = dict(settings, **{"solver.variant": "c1"})
    problem = _problem(noisy, truth, settings)
    cfg = build_bilevel(settings)
    rng = np.random.Generator(np.random.PCG64(int(settings["seed"])))
    rows = []
    worst = 0.0
    for trial in range(args.trials):
        lam = rng.uniform(10.0, 500.0, size=problem.dim)
        _, u, _ = bl.reduced_cost(lam, problem, cfg.beta)
        g_adj, _ = bl.adjoint_gradient(lam, problem, cfg.beta, u=u)
        g_fd = bl.fd_gradient(lam, problem, cfg.beta, scheme="central",
                              step_scale=1e-4)
        rel = float(np.linalg.norm(g_adj - g_fd) /
                    max(np.linalg.norm(g_fd), 1e-300))
        worst = max(worst, rel)
        row = {"trial": trial, "rel_error": rel}
        for i in range(problem.dim):
            row[f"lambda_{i}"] = float(lam[i])
            row[f"grad_adjoint_{i}"] = float(g_adj[i])
            row[f"grad_fd_{i}"] = float(g_fd[i])
        rows.append(row)
    names = ["trial"] + [f"lambda_{i}" for i in range(problem.dim)] + \
        [f"grad_adjoint_{i}" for i in range(problem.dim)] + \
        [f"grad_fd_{i}" for i in range(problem.dim)] + ["rel_error"]
    if args.output:
        write_csv(args.output, names, rows, settings)
    print(f"gradcheck: worst relative error {worst:.3e} (bound {args.bound})")
    return 0 if worst <= args.bound else 2


def cmd_sweep_mesh(args, settings):
    sizes = [int(s) for s in args.sizes.split(",")]
    make = phantoms.chirp if args.image == "chirp" else phantoms.phantom
    rows = []
    for n in sizes:
        truth = make(n)
        noisy = make_noisy(truth, settings)
        problem = _problem(noisy, truth, settings)
        cfg = build_bilevel(settings)
        lam, trace, _, _ = bl.learn_weights(problem, cfg)
        row = {"size": n, "cost": float(trace.costs[-1]),
               "iterations": trace.iterations}
        for i, v in enumerate(lam):
            row[f"lambda_{i}"] = float(v)
        rows.append(row)
    d = len(rows[0]) - 3
    names = ["size"] + [f"lambda_{i}" for i in range(d)] + \
        ["cost", "iterations"]
    write_csv(args.output, names, rows, settings)
    return 0


def cmd_sweep_noise(args, settings):
    variances = [float(s) for s in args.variances.split(",")]
    rows = []
    for var in variances:
        local = dict(settings, **{"noise.variance": repr(var)})
        truth = load_input(args, local)
        noisy = make_noisy(truth, local)
        problem = _problem(noisy, truth, local)
        cfg = build_bilevel(local)
        lam, trace, _, _ = bl.learn_weights(problem, cfg)
        row = {"variance": var, "cost": float(trace.costs[-1]),
               "iterations": trace.iterations}
        for i, v in enumerate(lam):
            row[f"lambda_{i}"] = float(v)
        rows.append(row)
    d = len(rows[0]) - 3
    names = ["variance"] + [f"lambda_{i}" for i in range(d)] + \
        ["cost", "iterations"]
    write_csv(args.output, names, rows, settings)
    return 0


def build_parser():
    parser = _Parser(prog="tvlearn",
                     description="Learn fidelity weights for TV denoising")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, phantom=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], dest="sets",
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--input", help="input image (PGM/PNG)")
        if phantom:
            p.add_argument("--phantom", type=int, metavar="N",
                           help="use the bundled NxN phantom")

    p = sub.add_parser("noise", help="corrupt an image with synthetic noise")
    common(p)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("denoise", help="run one inner solve at fixed weights")
    common(p)
    p.add_argument("--lambda", dest="lam", required=True,
                   help="comma-separated fidelity weights")
    p.add_argument("--output", required=True)
    p.add_argument("--trace", help="write the SSN residual trace CSV here")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("learn", help="learn weights for one image pair")
    common(p)
    p.add_argument("--noisy", help="noisy image (default: generated)")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("train", help="learn weights from several pairs")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE")
    p.add_argument("--pair", action="append", required=True,
                   metavar="NOISY:TRUTH")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare adjoint and FD gradients")
    common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--bound", type=float, default=1e-3)
    p.add_argument("--output", help="comparison table CSV")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-mesh", help="learned weight vs. grid size")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE")
    p.add_argument("--sizes", default="60,65,70,75,80,85")
    p.add_argument("--image", choices=("chirp", "shapes"), default="chirp",
                   help="phantom family shared across sizes")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sweep_mesh)

    p = sub.add_parser("sweep-noise", help="learned weight vs. noise level")
    common(p)
    p.add_argument("--variances", default="0.002,0.02")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sweep_noise)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = load_settings(args.config, args.sets)
        return args.func(args, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ss.SsnError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
