"""Command-line entry point: ``stablernn {grad-check,run,project}``.

Exit codes:

* 0 success
* 2 usage error (bad flags, unknown experiment)
* 3 config or weight-file error (malformed file, unknown key, scheme mismatch)
* 4 numeric failure (non-finite values, SVD did not converge)
* 5 check failure (gradient check above tolerance)

Experiment outputs go to ``--out``, else ``$STABLERNN_OUT``, else ``./runs``.
"""
import argparse
import logging
import os
import sys

from . import experiments, io
from .autograd import gradient_check
from .errors import ConfigError, NumericError
from .stability import LstmStabilityConfig, certificate, project_params

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5
OUT_ENV = "STABLERNN_OUT"

log = logging.getLogger("stablernn")


def _overrides(extra, parser):
    """Turn leftover ``--key=value`` / ``--key value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            parser.error(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            val = extra[i]
        else:
            parser.error(f"override --{key} needs a value")
        out[key.replace("-", "_")] = val
        i += 1
    return out


def _settings(args, extra, parser):
    """Resolve (experiment config, seed) from defaults, config file and flags."""
    name = args.experiment
    file_over, seed = {}, 0
    if args.config:
        sections = io.read_config(args.config)
        for sec, kv in sections.items():
            if sec == "run":
                for k, v in kv.items():
                    if k == "seed":
                        seed = int(v)
                    elif k == "experiment":
                        if v != name:
                            raise ConfigError(f"config is for experiment {v!r}, not {name!r}")
                    else:
                        raise ConfigError(f"unknown key {k!r} in section [run]")
            elif sec == name:
                file_over.update(kv)
            elif sec not in experiments.SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
    conf = experiments.resolve_config(name, file_over)
    conf = experiments.resolve_config(
        name, {**{k: experiments.format_value(v) for k, v in conf.items()},
               **_overrides(extra, parser)})
    if args.seed is not None:
        seed = args.seed
    return conf, seed


def echo_config(name, conf, seed):
    return {"run": {"experiment": name, "seed": str(seed)},
            name: {k: experiments.format_value(v) for k, v in conf.items()}}


def cmd_run(args, extra, parser):
    if args.experiment not in experiments.EXPERIMENTS:
        parser.error(f"unknown experiment {args.experiment!r}; "
                     f"choose from {', '.join(experiments.EXPERIMENTS)}")
    conf, seed = _settings(args, extra, parser)
    echo = echo_config(args.experiment, conf, seed)
    for sec, kv in echo.items():
        print(f"[{sec}]")
        for k, v in kv.items():
            print(f"{k} = {v}")
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    run_dir = os.path.join(root, experiments.run_dir_name(args.experiment, seed))
    base, n = run_dir, 1
    while os.path.exists(run_dir):
        run_dir = f"{base}.{n}"
        n += 1
    report = experiments.run_experiment(args.experiment, conf, seed, args.jobs)
    experiments.write_report(report, run_dir, echo)
    if report.flagged:
        print(f"{len(report.flagged)} run(s) aborted; see flagged.csv")
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_grad_check(args, extra, parser):
    if extra:
        parser.error(f"unexpected arguments {extra}")
    if args.trials < 0 or args.dims < 1 or args.T < 1:
        parser.error("dims and T must be positive and trials nonnegative")
    if args.trials == 0:
        print("no trials requested; nothing to check")
        return EXIT_OK
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    results = gradient_check(families, args.trials, args.seed, args.dims, args.T,
                             corrupt=args.corrupt)
    worst = max(results, key=lambda r: r.rel_error)
    print(f"{len(results)} instances, max relative error {worst.rel_error:.3e} "
          f"(tolerance {args.tol:g})")
    if worst.rel_error > args.tol:
        bad = [r for r in results if r.rel_error > args.tol]
        for r in bad[:10]:
            print(f"FAIL seed={args.seed} instance={r.seed} family={r.family} d_in={r.d_in} "
                  f"d_h={r.d_h} T={r.T} k={r.k} rel_error={r.rel_error:.3e}")
        return EXIT_CHECK
    return EXIT_OK


def _scheme(args, params):
    if args.scheme == "spectral":
        return ("spectral", args.cap if args.cap is not None else 0.999)
    if args.scheme == "lstm":
        if params.family != "lstm":
            raise ConfigError(f"scheme 'lstm' does not apply to {params.family} weights")
        return ("lstm", LstmStabilityConfig())
    raise ConfigError(f"unknown scheme {args.scheme!r}")


def cmd_project(args, extra, parser):
    if extra:
        parser.error(f"unexpected arguments {extra}")
    params, readout = io.load_weights(args.weights)
    projected = project_params(params, _scheme(args, params))
    io.save_weights(args.out, projected, readout)
    sys.stdout.write(certificate(projected).to_text())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="stablernn", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="\n".join(__doc__.split("\n")[2:]))
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grad-check", help="BPTT versus finite differences")
    g.add_argument("--dims", type=int, default=8, help="largest input/hidden dim")
    g.add_argument("--T", type=int, default=20, help="longest sequence")
    g.add_argument("--trials", type=int, default=20, help="instances per family")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--families", default="lds,rnn,lstm")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("run", help="run an experiment", allow_abbrev=False,
                       description="Extra --key=value flags override experiment settings.")
    r.add_argument("experiment", help=", ".join(experiments.EXPERIMENTS))
    r.add_argument("--config", help="key = value file with [run] and [<experiment>] sections")
    r.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    r.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    r.add_argument("--jobs", type=int, default=1, help="parallel seed runs")
    r.set_defaults(func=cmd_run)

    j = sub.add_parser("project", help="project weights onto a stable set")
    j.add_argument("weights")
    j.add_argument("--scheme", choices=("spectral", "lstm"), default="spectral")
    j.add_argument("--cap", type=float, default=None, help="spectral cap (default 0.999)")
    j.add_argument("--out", required=True, help="where to write the projected weights")
    j.set_defaults(func=cmd_project)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args, extra, parser)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
