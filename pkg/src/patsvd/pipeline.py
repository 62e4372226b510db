"""End-to-end workflow: assemble, factorize, simulate, train, reconstruct, evaluate.

Every stage records the checksums of its inputs and outputs in
``state.json``; a rerun skips stages whose recorded outputs are still on disk
unchanged and whose inputs and settings have not changed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .forward import assemble_system_matrix
from .geometry import BasisGrid, KaiserBesselParams, MeasurementGeometry
from .network import TrainConfig, load_params, reconstruct, save_params, set_deterministic, train
from .phantoms import Dataset, build_dataset, load_dataset, save_dataset
from .svd import (SvdFactors, TruncationPolicy, optimal_tsvd, pseudo_inverse_apply, select_alpha,
                  svd_factorize, tsvd_apply)

log = logging.getLogger(__name__)

METHODS = ("pinv", "tsvd", "optimal-tsvd", "net")


class PipelineError(RuntimeError):
    def __init__(self, stage, path, cause):
        super().__init__(f"[{stage}] {path}: {cause}")
        self.stage = stage
        self.path = path


class RoleError(ValueError):
    pass


@dataclass
class RunConfig:
    grid_size: int = 32
    detectors: int = 64
    times: int = 96
    horizon: float = 3.75
    kb_support: float | None = None  # None: scale the 0.055 / 128-grid blob to this grid
    kb_taper: float = 7.0
    kb_order: int = 2
    table_resolution: int = 16
    rank_cutoff: float = 1e-12
    svd_backend: str = "deterministic"
    noise: float = 0.07
    seed: int = 2019
    train_count: int = 300
    validation_count: int = 20
    test_count: int = 50
    deformation: float = 0.08
    alpha: float | None = None
    kept: int | None = None
    selection_draws: int = 3
    methods: list = field(default_factory=lambda: ["tsvd", "optimal-tsvd", "net"])
    epochs: int = 70
    learning_rate: float = 1e-4  # the 0.01 default diverges at desk scale
    momentum: float = 0.99
    batch_size: int = 8
    channels: list = field(default_factory=lambda: [16, 32, 64])
    figures: int = 4
    threads: int = 1
    output_dir: str = "run"

    def __post_init__(self):
        if self.alpha is not None and self.kept is not None:
            raise ValueError("alpha and kept are mutually exclusive")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")

    @property
    def grid(self) -> BasisGrid:
        if self.kb_support is None:
            kb = KaiserBesselParams.scaled_for(self.grid_size, taper=self.kb_taper, order=self.kb_order)
        else:
            kb = KaiserBesselParams(self.kb_support, self.kb_taper, self.kb_order)
        return BasisGrid(self.grid_size, kb)

    @property
    def geometry(self) -> MeasurementGeometry:
        return MeasurementGeometry(self.detectors, self.times, self.horizon)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.momentum, self.batch_size, self.seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


@dataclass
class EvalReport:
    method: str
    dataset: str
    errors: list
    kept: int | list | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")

    def to_dict(self):
        return {"method": self.method, "dataset": self.dataset, "kept": self.kept,
                "mean_relative_error": self.mean, "errors": list(self.errors)}


def relative_errors(recon, truth) -> np.ndarray:
    recon = np.atleast_2d(recon)
    truth = np.atleast_2d(truth)
    return np.linalg.norm(recon - truth, axis=1) / np.linalg.norm(truth, axis=1)


def check_disjoint(test: Dataset, train_set: Dataset | None = None):
    if test.role == "train":
        raise RoleError("training data cannot be used for evaluation")
    if train_set is not None:
        shared = set(test.phantom_seeds) & set(train_set.phantom_seeds)
        if shared:
            raise RoleError(f"{len(shared)} phantom seeds shared between test and training data")


def evaluate(reconstructions: dict, test: Dataset, train_set: Dataset | None = None,
             kept: dict | None = None, dataset_id: str = "") -> list[EvalReport]:
    """Mean relative error ``(1/M) sum |x_hat_i - x_i| / |x_i|`` per method."""
    check_disjoint(test, train_set)
    kept = kept or {}
    out = []
    for method, recon in reconstructions.items():
        if np.shape(recon) != np.shape(test.X):
            raise ValueError(f"{method}: reconstruction shape {np.shape(recon)} does not match "
                             f"{np.shape(test.X)}")
        errs = relative_errors(recon, test.X) if len(test.X) else np.empty(0)
        out.append(EvalReport(method, dataset_id, [float(e) for e in errs], kept.get(method)))
    return out


def run_method(method, F: SvdFactors, policy: TruncationPolicy | None, test: Dataset, model=None):
    """Reconstructions of every test sample plus the kept count(s) used."""
    if method == "pinv":
        return pseudo_inverse_apply(F, test.Y), F.rank
    if method == "tsvd":
        return tsvd_apply(F, policy, test.Y), F.kept(policy)
    if method == "optimal-tsvd":
        recon, ks = [], []
        for x, y in test:
            pol, r = optimal_tsvd(F, y, x)
            recon.append(r)
            ks.append(F.kept(pol))
        return np.array(recon).reshape(test.X.shape), ks
    if method == "net":
        if model is None:
            raise ValueError("method 'net' needs a trained model")
        model.check_factors(F)
        return reconstruct(model, F, policy, test.Y), F.kept(policy)
    raise ValueError(f"unknown method {method!r}")


def emit_figures(reports, reconstructions: dict, truth, grid: BasisGrid, directory,
                 sigma=None, count: int = 4):
    """Reconstruction and ``|x_hat - x|`` images as PGM, singular values as CSV."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    truth = np.atleast_2d(truth)
    for method, recon in reconstructions.items():
        recon = np.atleast_2d(recon)
        if recon.shape != truth.shape:
            raise ValueError(f"{method}: reconstruction shape {recon.shape} does not match {truth.shape}")
    for n in range(min(count, len(truth))):
        io.write_pgm(d / f"truth_{n:03d}.pgm", grid.as_image(truth[n]))
        for method, recon in reconstructions.items():
            recon = np.atleast_2d(recon)
            io.write_pgm(d / f"{method}_{n:03d}.pgm", grid.as_image(recon[n]))
            io.write_pgm(d / f"{method}_{n:03d}_absdiff.pgm", grid.as_image(np.abs(recon[n] - truth[n])))
    if sigma is not None:
        write_singular_values(d / "singular_values.csv", sigma)
    if reports:
        lines = ["method,mean_relative_error"] + [f"{r.method},{r.mean!r}" for r in reports]
        (d / "errors.csv").write_text("\n".join(lines) + "\n")


def write_singular_values(path, sigma):
    s = np.asarray(sigma)
    lines = ["index,sigma,sigma_relative"]
    lines += [f"{i + 1},{float(v)!r},{float(v / s[0])!r}" for i, v in enumerate(s)]
    Path(path).write_text("\n".join(lines) + "\n")


class _State:
    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {}

    def fresh(self, stage, key, outputs) -> bool:
        rec = self.data.get(stage)
        if not rec or rec["key"] != key:
            return False
        for p, chk in rec["outputs"].items():
            f = self.path.parent / p
            if not f.exists() or io.checksum_hex(io.file_checksum(f)) != chk:
                return False
        return set(rec["outputs"]) == {str(o) for o in outputs}

    def record(self, stage, key, outputs):
        self.data[stage] = {"key": key, "outputs": {
            str(o): io.checksum_hex(io.file_checksum(self.path.parent / o)) for o in outputs}}
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))

    def checksum(self, stage, output) -> str:
        return self.data[stage]["outputs"][str(output)]


def _key(*parts) -> str:
    return io.checksum_hex(io.fnv1a64(json.dumps(parts, sort_keys=True, default=str).encode()))


def run_pipeline(config: RunConfig) -> dict:
    """Run (or resume) the whole workflow in ``config.output_dir``; returns the report dict."""
    set_deterministic(config.threads)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = _State(out / "state.json")
    grid, geom = config.grid, config.geometry
    ran = []

    def stage(name, key, outputs, fn):
        outputs = [Path(o) for o in outputs]
        if state.fresh(name, key, outputs):
            log.info("stage %s: up to date", name)
            return
        log.info("stage %s: running", name)
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with stage context
            raise PipelineError(name, out / outputs[0], exc) from exc
        state.record(name, key, outputs)
        ran.append(name)

    # assemble
    k_asm = _key("assemble", grid.to_dict(), geom.to_dict(), config.table_resolution)
    stage("assemble", k_asm, ["matrix.bin"], lambda: io.save_matrix(
        out / "matrix.bin", assemble_system_matrix(grid, geom, config.table_resolution)))
    A = io.load_matrix(out / "matrix.bin")

    # svd
    k_svd = _key("svd", state.checksum("assemble", "matrix.bin"), config.rank_cutoff, config.svd_backend)

    def do_svd():
        F = svd_factorize(A, config.rank_cutoff, config.svd_backend)
        io.save_factors(out / "factors.bin", F)
        write_singular_values(out / "singular_values.csv", F.sigma)

    stage("svd", k_svd, ["factors.bin", "singular_values.csv"], do_svd)
    F = io.load_factors(out / "factors.bin")

    # phantoms + simulated data
    datasets = {}
    for role, count, noise in (("train", config.train_count, 0.0),
                               ("validation", config.validation_count, config.noise),
                               ("test", config.test_count, config.noise)):
        manifest = Path("data") / role / "manifest.json"
        k = _key("data", role, state.checksum("assemble", "matrix.bin"), count, noise, config.seed,
                 config.deformation)

        def make(role=role, count=count, noise=noise):
            save_dataset(build_dataset(count, grid, A, noise, role, config.seed, config.deformation),
                         out / "data" / role)

        stage(f"data-{role}", k, [manifest], make)
        datasets[role] = load_dataset(out / "data" / role)

    # truncation choice
    k_alpha = _key("alpha", state.checksum("svd", "factors.bin"),
                   state.checksum("data-validation", Path("data/validation/manifest.json")),
                   config.alpha, config.kept, config.noise, config.selection_draws, config.seed)

    def do_alpha():
        if config.alpha is not None:
            policy, how = TruncationPolicy(config.alpha), "given"
        elif config.kept is not None:
            policy, how = TruncationPolicy.keep(F, config.kept), "given"
        else:
            policy = select_alpha(F, datasets["validation"].X, config.noise,
                                  draws=config.selection_draws, seed=config.seed).policy
            how = "selected"
        (out / "alpha.json").write_text(json.dumps(
            {"alpha": policy.threshold, "kept": F.kept(policy), "how": how}, indent=1, sort_keys=True))

    stage("alpha", k_alpha, ["alpha.json"], do_alpha)
    policy = TruncationPolicy(json.loads((out / "alpha.json").read_text())["alpha"])

    # training
    model = None
    if "net" in config.methods:
        k_train = _key("train", state.checksum("svd", "factors.bin"),
                       state.checksum("data-train", Path("data/train/manifest.json")),
                       state.checksum("alpha", "alpha.json"), config.train_config.to_dict(),
                       config.channels)

        def do_train():
            params, losses = train(datasets["train"], F, policy, config.train_config,
                                   descriptor={"kind": "unet", "channels": config.channels})
            save_params(out / "model.bin", params)
            (out / "train_loss.csv").write_text(
                "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(losses)))

        stage("train", k_train, ["model.bin", "train_loss.csv"], do_train)
        model = load_params(out / "model.bin")

    # reconstruct + evaluate
    test_id = state.checksum("data-test", Path("data/test/manifest.json"))
    upstream = [state.checksum(s, o) for s, o in (("svd", "factors.bin"), ("alpha", "alpha.json"))]
    if model is not None:
        upstream.append(state.checksum("train", "model.bin"))
    recon, kept = {}, {}

    def do_recon(method):
        r, k = run_method(method, F, policy, datasets["test"], model)
        d = out / "recon" / method
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "reconstructions.npy", r)
        (d / "kept.json").write_text(json.dumps(k))

    for method in config.methods:
        files = [Path("recon") / method / "reconstructions.npy", Path("recon") / method / "kept.json"]
        stage(f"reconstruct-{method}", _key("reconstruct", method, test_id, upstream),
              files, lambda m=method: do_recon(m))
        recon[method] = np.load(out / files[0])
        kept[method] = json.loads((out / files[1]).read_text())

    def do_report():
        reports = evaluate(recon, datasets["test"], datasets["train"], kept, test_id)
        body = {"dataset": test_id, "noise": config.noise, "kept": F.kept(policy),
                "alpha": policy.threshold, "methods": [r.to_dict() for r in reports]}
        (out / "report.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
        emit_figures(reports, recon, datasets["test"].X, grid, out / "figures", F.sigma, config.figures)

    rec_keys = [state.checksum(f"reconstruct-{m}", Path("recon") / m / "reconstructions.npy")
                for m in config.methods]
    stage("evaluate", _key("evaluate", test_id, rec_keys, config.figures), ["report.json"], do_report)
    report = json.loads((out / "report.json").read_text())
    report["stages_run"] = ran
    return report
