"""Command-line interface.

Every subcommand takes ``--config FILE`` (JSON); explicit flags override the
file, which overrides the built-in desk profile.  Errors exit with status 1
and a message tagged with the failing stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .pipeline import (METHODS, PipelineError, RunConfig, emit_figures, evaluate, run_method,
                       run_pipeline, write_singular_values)

log = logging.getLogger("patsvd")

_GEOMETRY_FLAGS = {
    "grid_size": int, "detectors": int, "times": int, "horizon": float, "kb_support": float,
    "kb_taper": float, "kb_order": int, "table_resolution": int,
}


def _add_geometry(p):
    for name, typ in _GEOMETRY_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ)


def _add_truncation(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float, help="keep singular values with sigma^2 >= alpha")
    g.add_argument("--kept", type=int, help="keep this many singular values")


def _config(args) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    overrides = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return RunConfig.load(args.config, **overrides)


def _policy(cfg, F, required=True):
    from .svd import TruncationPolicy
    if cfg.alpha is not None:
        return TruncationPolicy(cfg.alpha)
    if cfg.kept is not None:
        return TruncationPolicy.keep(F, cfg.kept)
    if required:
        raise ValueError("give --alpha or --kept")
    return None


def cmd_assemble(args):
    from .forward import assemble_system_matrix
    cfg = _config(args)
    if args.stream:
        out = io.open_matrix_writer(args.output, cfg.grid, cfg.geometry)
        A = assemble_system_matrix(cfg.grid, cfg.geometry, cfg.table_resolution, out=out)
        io.finish_matrix_file(args.output, A)
    else:
        A = assemble_system_matrix(cfg.grid, cfg.geometry, cfg.table_resolution)
        io.save_matrix(args.output, A)
    print(f"{args.output}: {A.shape[0]}x{A.shape[1]} "
          f"checksum {io.checksum_hex(io.file_checksum(args.output))}")


def cmd_svd(args):
    from .svd import svd_factorize
    cfg = _config(args)
    A = io.load_matrix(args.matrix, mmap=args.mmap)
    F = svd_factorize(A, cfg.rank_cutoff, cfg.svd_backend, rank=args.rank, seed=cfg.seed)
    io.save_factors(args.output, F)
    if args.sigma_csv:
        write_singular_values(args.sigma_csv, F.sigma)
    print(f"{args.output}: rank {F.rank}, sigma_1 {F.sigma[0]:.6g}, sigma_r {F.sigma[-1]:.6g}")


def cmd_phantoms(args):
    from .phantoms import build_dataset, export_pgm, save_dataset
    cfg = _config(args)
    A = io.load_matrix(args.matrix)
    ds = build_dataset(args.count, A.grid, A, cfg.noise, args.role, cfg.seed, cfg.deformation)
    save_dataset(ds, args.output)
    if args.pgm:
        export_pgm(ds, A.grid, args.pgm)
    print(f"{args.output}: {len(ds)} {args.role} samples, noise {ds.noise_fraction}")


def cmd_simulate(args):
    from .forward import forward_apply
    from .phantoms import add_noise
    A = io.load_matrix(args.matrix)
    x = io.read_vector(args.input)
    y = add_noise(forward_apply(A, x).values, args.noise or 0.0, args.seed)
    io.write_vector(args.output, y.values)
    print(f"{args.output}: {len(y)} samples, noise {y.noise_fraction}")


def cmd_train(args):
    from .network import save_params, set_deterministic, train
    from .phantoms import load_dataset
    cfg = _config(args)
    set_deterministic(cfg.threads)
    F = io.load_factors(args.factors)
    policy = _policy(cfg, F)
    params, losses = train(load_dataset(args.dataset), F, policy, cfg.train_config,
                           descriptor={"kind": "unet", "channels": cfg.channels})
    save_params(args.output, params)
    print(f"{args.output}: kept {F.kept(policy)}, loss {losses[0]:.6g} -> {losses[-1]:.6g}")


def cmd_reconstruct(args):
    from .network import load_params, set_deterministic
    from .phantoms import load_dataset
    cfg = _config(args)
    set_deterministic(cfg.threads)
    F = io.load_factors(args.factors)
    model = load_params(args.model) if args.model else None
    if cfg.alpha is None and cfg.kept is None and model is not None:
        cfg.alpha = model.threshold
    policy = _policy(cfg, F, required=args.method in ("tsvd", "net"))
    ds = load_dataset(args.dataset)
    recon, kept = run_method(args.method, F, policy, ds, model)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "reconstructions.npy", recon)
    (out / "kept.json").write_text(json.dumps(kept))
    print(f"{out}: {len(recon)} reconstructions with {args.method}")


def cmd_evaluate(args):
    from .phantoms import load_dataset
    test = load_dataset(args.dataset)
    train_set = load_dataset(args.train_dataset) if args.train_dataset else None
    recon, kept = {}, {}
    for d in args.recon:
        d = Path(d)
        recon[d.name] = np.load(d / "reconstructions.npy")
        if (d / "kept.json").exists():
            kept[d.name] = json.loads((d / "kept.json").read_text())
    reports = evaluate(recon, test, train_set, kept, io.checksum_hex(
        io.file_checksum(Path(args.dataset) / "manifest.json")))
    body = {"methods": [r.to_dict() for r in reports]}
    text = json.dumps(body, indent=1, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    for r in reports:
        print(f"{r.method}: mean relative error {r.mean:.6f}")


def cmd_oracle(args):
    from .oracle import FdConfig, oracle_column
    cfg = _config(args)
    fd = FdConfig.for_problem(cfg.grid.kb, cfg.geometry, cells_per_radius=args.cells_per_radius,
                              cfl=args.cfl)
    col = oracle_column(args.index, cfg.grid, cfg.geometry, fd, richardson=not args.no_richardson)
    traces = cfg.geometry.as_traces(col)
    t = cfg.geometry.time_samples
    lines = ["detector,time,pressure"]
    lines += [f"{n},{float(t[j])!r},{float(traces[n, j])!r}"
              for n in range(traces.shape[0]) for j in range(len(t))]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pipeline(args):
    cfg = _config(args)
    report = run_pipeline(cfg)
    for m in report["methods"]:
        print(f"{m['method']}: mean relative error {m['mean_relative_error']:.6f}")
    print(f"stages run: {', '.join(report['stages_run']) or 'none'}")


def cmd_emit_figures(args):
    from .phantoms import load_dataset
    test = load_dataset(args.dataset)
    grid = io.load_matrix(args.matrix, mmap=True).grid if args.matrix else _config(args).grid
    recon = {Path(d).name: np.load(Path(d) / "reconstructions.npy") for d in args.recon}
    sigma = io.load_factors(args.factors).sigma if args.factors else None
    reports = evaluate(recon, test)
    emit_figures(reports, recon, test.X, grid, args.output, sigma, args.count)
    print(f"{args.output}: figures for {min(args.count, len(test))} samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patsvd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.set_defaults(func=fn)
        return p

    p = command("assemble", cmd_assemble, "assemble the system matrix")
    _add_geometry(p)
    p.add_argument("--output", required=True)
    p.add_argument("--stream", action="store_true", help="write columns straight to disk")

    p = command("svd", cmd_svd, "factorize a stored matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--rank-cutoff", type=float)
    p.add_argument("--svd-backend", choices=("deterministic", "randomized"))
    p.add_argument("--rank", type=int, help="target rank for the randomized backend")
    p.add_argument("--seed", type=int)
    p.add_argument("--mmap", action="store_true")
    p.add_argument("--sigma-csv")

    p = command("phantoms", cmd_phantoms, "generate phantoms with simulated data")
    p.add_argument("--matrix", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--role", choices=("train", "validation", "test"), required=True)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--deformation", type=float)
    p.add_argument("--output", required=True)
    p.add_argument("--pgm", help="also write phantom images to this directory")

    p = command("simulate", cmd_simulate, "apply the forward model to one coefficient vector")
    p.add_argument("--matrix", required=True)
    p.add_argument("--input", required=True, help="raw little-endian f64 coefficients")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)

    p = command("train", cmd_train, "train the projected network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--factors", required=True)
    _add_truncation(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--output", required=True)

    p = command("reconstruct", cmd_reconstruct, "reconstruct a dataset")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--factors", required=True)
    p.add_argument("--model")
    _add_truncation(p)
    p.add_argument("--threads", type=int)
    p.add_argument("--output", required=True, help="directory; its name labels the method")

    p = command("evaluate", cmd_evaluate, "mean relative error of stored reconstructions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--recon", nargs="+", required=True)
    p.add_argument("--train-dataset", help="verify disjointness from this training set")
    p.add_argument("--output")

    p = command("oracle", cmd_oracle, "finite-difference traces of one basis function (CSV)")
    _add_geometry(p)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--cells-per-radius", type=int, default=16)
    p.add_argument("--cfl", type=float, default=0.7)
    p.add_argument("--no-richardson", action="store_true")
    p.add_argument("--output")

    p = command("pipeline", cmd_pipeline, "run or resume the full workflow")
    _add_geometry(p)
    _add_truncation(p)
    for name, typ in (("noise", float), ("seed", int), ("train_count", int),
                      ("validation_count", int), ("test_count", int), ("epochs", int),
                      ("learning_rate", float), ("momentum", float), ("batch_size", int),
                      ("threads", int), ("figures", int), ("svd_backend", str), ("output_dir", str)):
        p.add_argument("--" + name.replace("_", "-"), type=typ)
    p.add_argument("--methods", nargs="+", choices=METHODS)

    p = command("emit-figures", cmd_emit_figures, "write PGM images and CSV tables")
    _add_geometry(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--recon", nargs="+", required=True)
    p.add_argument("--matrix")
    p.add_argument("--factors")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
