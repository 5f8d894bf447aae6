"""End-to-end orchestration: collect, synthesize, ISM design, compose, simulate, verify.

If composition (or synthesis) fails, fresh trajectories are collected with a new
seed and ``T_growth`` more samples, up to ``pipeline.retries`` times. Every stage
writes its artifacts under ``out_dir`` together with the hashes of its inputs, so a
later stage (or ``verify``) can refuse artifacts that do not belong together.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .composition import NetworkCertificate, compose
from .config import Config
from .config import build_network as _build_network
from .experiment import (DataMatrices, DivergenceError, ExperimentConfig, RichnessError, check_richness,
                         collect_trajectories, dump_data, estimate_B, solve_Q)
from .ism import IsmController, design_ism
from .model import NetworkModel
from .sim import (SimConfig, TrajectoryLog, decay_check, monte_carlo_iss, simulate, verify_gas,
                  verify_sliding, write_summary)
from .synthesis import (CertificateValidationError, IssCertificate, SolverFailure, SynthesisInfeasible,
                        SynthesisOptions, synthesize_grid, synthesize_iss)

STAGES = ("collect", "synthesize", "ism", "compose", "simulate", "verify")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


class ProvenanceError(RuntimeError):
    """An artifact was produced from inputs other than the ones on disk."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int = EXIT_INFEASIBLE):
        self.stage, self.code = stage, code
        super().__init__(f"{stage}: {message}")


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(path, obj) -> None:
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(type(o))

    Path(path).write_text(json.dumps(obj, indent=1, default=conv, sort_keys=True))


@dataclass
class PipelineRun:
    """State of one pipeline execution."""

    config: Config
    out_dir: Path
    net: NetworkModel | None = None
    groups: list = field(default_factory=list)          # [(representative, [members])]
    data: dict = field(default_factory=dict)            # representative -> DataMatrices
    rep_certs: dict = field(default_factory=dict)       # representative -> IssCertificate
    certs: list = field(default_factory=list)           # per subsystem
    B_hat: dict = field(default_factory=dict)
    isms: list = field(default_factory=list)
    composition: NetworkCertificate | None = None
    log: TrajectoryLog | None = None
    nominal_log: TrajectoryLog | None = None
    status: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    attempts: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    experiment: ExperimentConfig | None = None
    error: str = ""

    @property
    def run_id(self) -> str:
        return "run-" + self.config.digest()[:12]

    @property
    def exit_code(self) -> int:
        if any(v == "config-error" for v in self.status.values()):
            return EXIT_CONFIG
        if any(v == "infeasible" for v in self.status.values()):
            return EXIT_INFEASIBLE
        if self.verdicts and not all(v["passed"] for v in self.verdicts.values()):
            return EXIT_VERIFY
        if any(v == "failed" for v in self.status.values()):
            return EXIT_VERIFY
        return EXIT_OK

    def path(self, *parts) -> Path:
        p = self.out_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def subsystem_groups(net: NetworkModel, reuse: bool) -> list[tuple[int, list[int]]]:
    """Identical subsystems (same matrices, dictionary and perturbation bound) share one design."""
    if not reuse:
        return [(i, [i]) for i in range(net.N)]
    keys: dict = {}
    for i, s in enumerate(net.subsystems):
        key = (s.A.tobytes(), s.B.tobytes(), s.A.shape, tuple(s.dictionary.term_strings), s.gamma_sup)
        keys.setdefault(key, []).append(i)
    return [(members[0], members) for members in keys.values()]


def _experiment(cfg: Config, attempt: int) -> ExperimentConfig:
    e = cfg.experiment
    return ExperimentConfig(T=e.T + attempt * cfg.pipeline.T_growth, tau=e.tau, amplitude=e.amplitude,
                            x0_box=e.x0_box, derivative_mode=e.derivative_mode,
                            seed=cfg.seed + 7919 * attempt, substeps=e.substeps, scheme=e.scheme)


def _synth_options(cfg: Config, kappa=None, mu=None) -> SynthesisOptions:
    s = cfg.synthesis
    return SynthesisOptions(kappa=s.kappa if kappa is None else kappa, mu=s.mu if mu is None else mu,
                            eps_pd=s.eps_pd, objective=s.objective, condition_relax=s.condition_relax,
                            lmi_margin=s.lmi_margin, n_mc=s.n_mc, radius=s.radius, seed=cfg.seed)


def _collect_one(args):
    net, rep, exp = args
    d = collect_trajectories(net, rep, exp)
    return d, check_richness(d)


def _synth_one(args):
    d, D, opt = args
    t0 = time.perf_counter()
    cert = synthesize_iss(d, D, opt)
    return cert, time.perf_counter() - t0


def _map(fn, items, parallel: int):
    if parallel > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            return list(ex.map(fn, items))
    return [fn(a) for a in items]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_collect(run: PipelineRun, attempt: int = 0) -> None:
    cfg = run.config
    run.experiment = exp = _experiment(cfg, attempt)
    reps = [r for r, _ in run.groups]
    results = _map(_collect_one, [(run.net, r, exp) for r in reps], cfg.pipeline.parallel)
    run.data = {}
    for r, (d, rich) in zip(reps, results):
        if not rich.ok:
            raise RichnessError(f"subsystem {r}: {rich.hint}")
        run.data[r] = d


def stage_synthesize(run: PipelineRun) -> None:
    cfg = run.config
    run.rep_certs = {}
    t0 = time.perf_counter()
    grid = bool(cfg.synthesis.kappa_grid or cfg.synthesis.mu_grid)
    if grid:
        for rep, members in run.groups:
            d = run.data[rep]
            accept = None
            if len(run.groups) == 1:
                accept = lambda c: _composition_for(run, {rep: c}).feasible
            res = synthesize_grid(d, run.net.coupling_matrix(rep), cfg.synthesis.kappa_grid or [cfg.synthesis.kappa],
                                  cfg.synthesis.mu_grid or [cfg.synthesis.mu], _synth_options(cfg), accept)
            run.attempts.append({"stage": "grid", "subsystem": rep, "tried": res.attempts})
            if res.cert is None:
                raise SynthesisInfeasible("dissipation-lmi", f"no (kappa, mu) grid point accepted for subsystem {rep}")
            run.rep_certs[rep] = res.cert
    else:
        opt = _synth_options(cfg)
        reps = [r for r, _ in run.groups]
        out = _map(_synth_one, [(run.data[r], run.net.coupling_matrix(r), opt) for r in reps],
                   cfg.pipeline.parallel)
        for r, (cert, dt) in zip(reps, out):
            run.rep_certs[r] = cert
            run.timings.setdefault("solve_per_subsystem", []).append(dt)
    run.timings["synthesize"] = time.perf_counter() - t0
    run.certs = _expand(run, run.rep_certs)


def _expand(run: PipelineRun, rep_certs: dict) -> list:
    certs = [None] * run.net.N
    for rep, members in run.groups:
        for i in members:
            certs[i] = rep_certs[rep].with_coupling(run.net.coupling_matrix(i))
    return certs


def _composition_for(run: PipelineRun, rep_certs: dict) -> NetworkCertificate:
    return compose(_expand(run, rep_certs), run.net.topology, run.config.synthesis.strict_dense)


def stage_ism(run: PipelineRun) -> None:
    cfg = run.config
    run.B_hat, run.isms = {}, [None] * run.net.N
    for rep, members in run.groups:
        d = run.data[rep]
        Bh = estimate_B(d, solve_Q(d.Delta, d.Delta_bar), run.net.coupling_matrix(rep))
        run.B_hat[rep] = Bh
        C = None if cfg.ism.C is None else np.asarray(cfg.ism.C, float)
        ctrl = design_ism(Bh, run.net.subsystems[rep].gamma_sup, C, cfg.ism.margin, cfg.ism.mode, cfg.ism.eps_bl)
        for i in members:
            run.isms[i] = ctrl


def stage_compose(run: PipelineRun) -> None:
    run.composition = compose(run.certs, run.net.topology, run.config.synthesis.strict_dense)


def design(run: PipelineRun) -> None:
    """Collect, synthesize, design ISM and compose, retrying per the data-collection budget."""
    cfg = run.config
    last = ""
    for attempt in range(cfg.pipeline.retries + 1):
        rec = {"attempt": attempt}
        try:
            t0 = time.perf_counter()
            stage_collect(run, attempt)
            run.timings["collect"] = time.perf_counter() - t0
            run.status["collect"] = "ok"
            stage_synthesize(run)
            run.status["synthesize"] = "ok"
            t0 = time.perf_counter()
            stage_ism(run)
            run.timings["ism"] = time.perf_counter() - t0
            run.status["ism"] = "ok"
            t0 = time.perf_counter()
            stage_compose(run)
            run.timings["compose"] = time.perf_counter() - t0
        except (RichnessError, DivergenceError) as exc:
            run.status["collect"] = "retry"
            last = rec["collect"] = str(exc)
            run.attempts.append(rec)
            continue
        except (SynthesisInfeasible, SolverFailure, CertificateValidationError) as exc:
            run.status["synthesize"] = "retry"
            last = rec["synthesize"] = str(exc)
            run.attempts.append(rec)
            continue
        if run.composition.feasible:
            run.status["compose"] = "ok"
            rec["compose"] = "feasible"
            run.attempts.append(rec)
            return
        run.status["compose"] = "retry"
        last = rec["compose"] = run.composition.verdict.hint
        run.attempts.append(rec)
    failed = next((s for s in ("collect", "synthesize", "compose") if run.status.get(s) == "retry"), "compose")
    run.status[failed] = "infeasible"
    run.error = f"{failed} failed after {cfg.pipeline.retries} retries: {last}"
    raise StageError(failed, run.error)


def _sim_config(cfg: Config, **over) -> SimConfig:
    s = cfg.sim
    base = SimConfig(horizon=s.horizon, h=s.h, scheme=s.scheme, perturbation=s.perturbation,
                     controllers=s.controllers, x0_box=s.x0_box, seed=cfg.seed, log_every=s.log_every,
                     tau=cfg.experiment.tau, backend=s.backend)
    return replace(base, **over)


def stage_simulate(run: PipelineRun) -> None:
    t0 = time.perf_counter()
    cfg = run.config
    isms = run.isms if cfg.sim.controllers == "iss_plus_ism" else None
    run.log = simulate(run.net, run.certs, isms, _sim_config(cfg))
    if cfg.verify.nominal_run:
        run.nominal_log = simulate(run.net, run.certs, None,
                                   _sim_config(cfg, perturbation=False, controllers="iss_only"))
    run.timings["simulate"] = time.perf_counter() - t0
    run.status["simulate"] = "diverged" if run.log.diverged else "ok"


def stage_verify(run: PipelineRun) -> None:
    t0 = time.perf_counter()
    cfg, v = run.config, run.config.verify
    kappa = run.composition.kappa if run.composition is not None else None
    verdicts = {}
    if run.log is not None:
        g = verify_gas(run.log, v.shrink_factor, kappa=kappa)
        verdicts["gas"] = {"passed": g.passed, **g.__dict__}
        if cfg.sim.controllers == "iss_plus_ism":
            band = v.sliding_band if v.sliding_band is not None else max(c.band for c in run.isms)
            s = verify_sliding(run.log, band)
            verdicts["sliding"] = {**s.__dict__}
    if run.nominal_log is not None and kappa is not None:
        dc = decay_check(run.nominal_log, kappa, v.decay_slack, v.decay_fraction)
        verdicts["decay"] = {"passed": dc.passed, **dc.__dict__}
    mc_all, worst = True, -np.inf
    seen = set()
    for rep, members in run.groups:
        rep_cert = run.rep_certs[rep]
        rep_obj = rep_cert.rep()
        for i in members:
            D = run.net.coupling_matrix(i)
            key = (rep, D.shape, round(run.certs[i].rho, 15))
            if key in seen:
                continue
            seen.add(key)
            r = monte_carlo_iss(run.certs[i], rep_obj, D, v.n_mc, v.radius, seed=cfg.seed)
            mc_all &= r.passed
            worst = max(worst, r.max_violation)
    verdicts["iss_monte_carlo"] = {"passed": mc_all, "max_violation": worst, "n_mc": v.n_mc,
                                   "radius": v.radius, "distinct_checks": len(seen)}
    run.verdicts = verdicts
    run.timings["verify"] = time.perf_counter() - t0
    run.status["verify"] = "ok" if all(x["passed"] for x in verdicts.values()) else "failed"


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_design(run: PipelineRun) -> None:
    cfg_digest = run.config.digest()
    manifest = {"run_id": run.run_id, "config": run.config.to_dict(), "config_digest": cfg_digest,
                "groups": [[r, m] for r, m in run.groups], "files": {}}
    for rep, d in run.data.items():
        p = run.path("data", f"subsystem_{rep}.npz")
        d.save(p)
        dump_data(run.out_dir / "data", d)
        manifest["files"][f"data/{rep}"] = {"path": str(p.relative_to(run.out_dir)), "digest": d.digest()}
    for rep, c in run.rep_certs.items():
        p = run.path("certificates", f"subsystem_{rep}.json")
        _dump_json(p, {"certificate": c.to_dict(),
                       "provenance": {"config_digest": cfg_digest, "data_digest": run.data[rep].digest()}})
        manifest["files"][f"certificate/{rep}"] = {"path": str(p.relative_to(run.out_dir)), "sha256": file_hash(p)}
        if run.isms:
            q = run.path("ism", f"subsystem_{rep}.json")
            _dump_json(q, {"ism": run.isms[rep].to_dict(),
                           "provenance": {"certificate_sha256": file_hash(p),
                                          "data_digest": run.data[rep].digest()}})
            manifest["files"][f"ism/{rep}"] = {"path": str(q.relative_to(run.out_dir)), "sha256": file_hash(q)}
    if run.composition is not None:
        p = run.path("composition.json")
        cert_hashes = {k: v["sha256"] for k, v in manifest["files"].items() if k.startswith("certificate/")}
        _dump_json(p, {**run.composition.summary(), "topology": run.net.topology.kind, "N": run.net.N,
                       "provenance": {"certificates": cert_hashes, "config_digest": cfg_digest}})
        run.composition.write_xi_table(run.path("xi.csv"))
        manifest["files"]["composition"] = {"path": "composition.json", "sha256": file_hash(p)}
    manifest["status"] = run.status
    manifest["attempts"] = run.attempts
    _dump_json(run.path("manifest.json"), manifest)


def load_run(out_dir, check: bool = True) -> PipelineRun:
    """Rebuild a run from the artifacts in ``out_dir``; ``check`` enforces provenance."""
    from .config import config_from_dict

    out_dir = Path(out_dir)
    mpath = out_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found; run the earlier stages first")
    manifest = json.loads(mpath.read_text())
    cfg = config_from_dict(manifest["config"])
    if check and cfg.digest() != manifest["config_digest"]:
        raise ProvenanceError("manifest config digest does not match its config")
    run = PipelineRun(cfg, out_dir)
    run.net = _build_network(cfg.network)
    run.groups = [(int(r), [int(i) for i in m]) for r, m in manifest["groups"]]
    run.status = dict(manifest.get("status", {}))
    run.attempts = list(manifest.get("attempts", []))
    files = manifest["files"]
    for rep, _ in run.groups:
        if f"data/{rep}" in files:
            d = DataMatrices.load(out_dir / files[f"data/{rep}"]["path"])
            if check and d.digest() != files[f"data/{rep}"]["digest"]:
                raise ProvenanceError(f"data for subsystem {rep} changed since it was recorded")
            run.data[rep] = d
        if f"certificate/{rep}" in files:
            p = out_dir / files[f"certificate/{rep}"]["path"]
            blob = json.loads(p.read_text())
            if check:
                if file_hash(p) != files[f"certificate/{rep}"]["sha256"]:
                    raise ProvenanceError(f"certificate for subsystem {rep} was modified")
                if rep in run.data and blob["provenance"]["data_digest"] != run.data[rep].digest():
                    raise ProvenanceError(f"certificate for subsystem {rep} was built from different data")
            run.rep_certs[rep] = IssCertificate.from_dict(blob["certificate"])
        if f"ism/{rep}" in files:
            p = out_dir / files[f"ism/{rep}"]["path"]
            blob = json.loads(p.read_text())
            if check and f"certificate/{rep}" in files and \
                    blob["provenance"]["certificate_sha256"] != files[f"certificate/{rep}"]["sha256"]:
                raise ProvenanceError(f"ISM design for subsystem {rep} belongs to a different certificate")
            ctrl = IsmController.from_dict(blob["ism"])
            run.isms = run.isms or [None] * run.net.N
            for _, members in [g for g in run.groups if g[0] == rep]:
                for i in members:
                    run.isms[i] = ctrl
    if run.rep_certs and len(run.rep_certs) == len(run.groups):
        run.certs = _expand(run, run.rep_certs)
    if "composition" in files and run.certs:
        if check:
            blob = json.loads((out_dir / "composition.json").read_text())
            now = {k: v["sha256"] for k, v in files.items() if k.startswith("certificate/")}
            if blob["provenance"]["certificates"] != now:
                raise ProvenanceError("composition was computed from different certificates")
        stage_compose(run)
    return run


def _update_manifest(run: PipelineRun, **entries) -> None:
    mpath = run.out_dir / "manifest.json"
    manifest = json.loads(mpath.read_text())
    for k, v in entries.items():
        if v is None:
            manifest["files"].pop(k, None)
        else:
            manifest["files"][k] = v
    manifest["status"] = run.status
    _dump_json(mpath, manifest)


def _composition_sha(run: PipelineRun) -> str:
    return file_hash(run.out_dir / "composition.json")


def save_logs(run: PipelineRun) -> None:
    """Full-resolution logs (``.npz``), downsampled CSV and plot series."""
    ds = max(1, run.config.sim.csv_downsample)
    entries = {}
    for key, log in (("log", run.log), ("nominal_log", run.nominal_log)):
        if log is None:
            entries[key] = None
            continue
        p = run.path("sim", f"{key}.npz")
        log.save(p)
        entries[key] = {"path": str(p.relative_to(run.out_dir)), "sha256": file_hash(p),
                        "composition_sha256": _composition_sha(run)}
    if run.log is not None:
        run.log.write_csv(run.path("sim", "log.csv"), downsample=ds)
        run.log.write_series(run.out_dir / "sim" / "series", downsample=ds)
    _update_manifest(run, **entries)


def load_logs(run: PipelineRun, check: bool = True) -> None:
    files = json.loads((run.out_dir / "manifest.json").read_text())["files"]
    for key in ("log", "nominal_log"):
        if key not in files:
            continue
        p = run.out_dir / files[key]["path"]
        if check:
            if file_hash(p) != files[key]["sha256"]:
                raise ProvenanceError(f"{key} was modified after it was recorded")
            if files[key]["composition_sha256"] != _composition_sha(run):
                raise ProvenanceError(f"{key} was simulated with a different network certificate")
        setattr(run, key, TrajectoryLog.load(p))


def save_outputs(run: PipelineRun) -> None:
    """Verdict summary and the report."""
    if run.verdicts:
        write_summary(run.path("summary.json"), verdicts=run.verdicts,
                      max_sigma=run.verdicts.get("sliding", {}).get("max_sigma"),
                      decay_exponent=run.verdicts.get("gas", {}).get("decay_exponent"))
    write_report(run)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("topology", "N", "T", "rt_per_subsystem_s", "kappa", "alpha1", "alpha2",
                  "feasible", "max_Xi", "gas", "sliding", "iss_mc", "decay")


def report_row(run: PipelineRun) -> dict:
    comp = run.composition
    solve = run.timings.get("solve_per_subsystem") or []
    verdict = lambda k: run.verdicts[k]["passed"] if k in run.verdicts else None
    return {
        "topology": run.config.network.topology, "N": run.config.network.N,
        "T": run.experiment.T if run.experiment else run.config.experiment.T,
        "rt_per_subsystem_s": float(np.mean(solve)) if solve else None,
        "kappa": comp.kappa if comp is not None and comp.feasible else None,
        "alpha1": comp.alpha1 if comp is not None else None,
        "alpha2": comp.alpha2 if comp is not None else None,
        "feasible": comp.feasible if comp is not None else False,
        "max_Xi": comp.verdict.max_Xi if comp is not None else None,
        "gas": verdict("gas"), "sliding": verdict("sliding"), "iss_mc": verdict("iss_monte_carlo"),
        "decay": verdict("decay"),
    }


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "pass" if v else "FAIL"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cols = REPORT_COLUMNS
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[k]) for row in cells)) for k, c in enumerate(cols)]
    line = lambda vals: "| " + " | ".join(v.ljust(w) for v, w in zip(vals, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(cols), sep] + [line(r) for r in cells])


def write_report(run: PipelineRun) -> dict:
    row = report_row(run)
    out = {"run_id": run.run_id, "row": row, "status": run.status, "timings": run.timings,
           "attempts": run.attempts, "error": run.error, "exit_code": run.exit_code}
    _dump_json(run.path("report.json"), out)
    text = [f"# {run.config.name} ({run.run_id})", "", format_table([row]), ""]
    text += [f"- {k}: {v}" for k, v in run.status.items()]
    if run.error:
        text += ["", f"error: {run.error}"]
    run.path("report.md").write_text("\n".join(text) + "\n")
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def new_run(cfg: Config, out_dir) -> PipelineRun:
    run = PipelineRun(cfg, Path(out_dir))
    run.out_dir.mkdir(parents=True, exist_ok=True)
    run.net = _build_network(cfg.network)
    run.groups = subsystem_groups(run.net, cfg.pipeline.reuse)
    return run


def run_pipeline(cfg: Config, out_dir, stop_after: str = "verify") -> PipelineRun:
    """Run the stages in order up to ``stop_after``; never raises for stage failures."""
    run = new_run(cfg, out_dir)
    t0 = time.perf_counter()
    try:
        design(run)
    except StageError:
        save_design(run)
        write_report(run)
        return run
    save_design(run)
    if STAGES.index(stop_after) >= STAGES.index("simulate"):
        stage_simulate(run)
    if stop_after == "verify":
        stage_verify(run)
    run.timings["total"] = time.perf_counter() - t0
    if run.log is not None:
        save_logs(run)
    save_outputs(run)
    return run
