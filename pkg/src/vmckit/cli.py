"""Command-line experiment harness.

Subcommands: ``verify``, ``vmc-run``, ``pretrain-run``, ``compare-pretrain``
and ``report``.  Exit codes: 0 success, 1 failed check, 2 bad configuration
or input file, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import math
import statistics
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .ansatz import (FEATURES, ExpFamilyAnsatz, MatrixMlpAnsatz, MlpAnsatz, TableAnsatz,
                     save_parameters)
from .checks import INJECTIONS, run_checks
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import DiagnosticsError, loglog_slope, running_min, theorem_ledger
from .model import (BoxSpace, FiniteSpace, FiniteWeights, Lebesgue, SchrodingerHamiltonian,
                    TargetInduced, coulomb_potential, ground_truth_spectrum, harmonic_potential,
                    norm, path_hamiltonian, random_symmetric_hamiltonian)
from .parallel import set_threads
from .pretrain import (STREAM_EVAL, STREAM_INIT, OrbitalProblem, PretrainProblem, Target,
                       hermite_orbitals, orbital_eval_set, orbital_pretrain, pretrain_train)
from .sampler import MetropolisSampler, RhoSampler, make_rng
from .svg import Series, line_plot
from .trace import TraceError, read_trace, write_trace
from .vmc import STREAM_MCMC, Schedule, VmcProblem, vmc_train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
STREAM_TARGET = 7
EVAL_GRID = 2001
EVAL_SAMPLES = 4096


# ---------------------------------------------------------------------------
# Building experiment pieces from a configuration
# ---------------------------------------------------------------------------

class System:
    """Resolved physical system: space, Hamiltonian and known reference values."""

    def __init__(self, cfg: ExperimentConfig):
        sc = cfg.system
        self.kind = sc.kind
        self.exact_ground = None
        self.ground_state = None
        if sc.kind == "finite":
            self.space = FiniteSpace(sc.size)
            if sc.hamiltonian == "path":
                self.hamiltonian = path_hamiltonian(sc.diagonal)
            else:
                self.hamiltonian = random_symmetric_hamiltonian(sc.size, make_rng(cfg.run.seed, STREAM_TARGET))
            self.exact_ground, self.ground_state = ground_truth_spectrum(self.hamiltonian)
        elif sc.kind == "ho1d":
            self.space = BoxSpace.cube(1, sc.box_half_width)
            self.hamiltonian = SchrodingerHamiltonian(harmonic_potential)
            self.exact_ground = 0.5
            self.ground_state = lambda x: np.exp(-0.5 * np.sum(x * x, axis=-1))
        elif sc.kind == "hatom":
            self.space = BoxSpace.cube(3, sc.box_half_width)
            self.hamiltonian = SchrodingerHamiltonian(coulomb_potential)
            self.exact_ground = -0.5
            self.ground_state = lambda x: np.exp(-np.linalg.norm(x, axis=-1))
        else:
            self.space = BoxSpace.cube(sc.n_orbitals, sc.box_half_width)
            self.hamiltonian = None


def build_ansatz(cfg: ExperimentConfig, system: System):
    ac = cfg.ansatz
    if system.kind == "pretrain_toy":
        if ac.kind != "matrix_mlp":
            raise ConfigError("pretrain_toy needs [ansatz] kind = matrix_mlp")
        return MatrixMlpAnsatz(cfg.system.n_orbitals, 1, ac.hidden, ac.activation)
    if ac.kind == "matrix_mlp":
        raise ConfigError("matrix_mlp is only available for pretrain_toy")
    if system.kind == "finite":
        if ac.kind != "table":
            raise ConfigError("finite systems need [ansatz] kind = table")
        return TableAnsatz(system.space)
    if ac.kind == "table":
        raise ConfigError("table ansatz needs a finite system")
    if ac.kind == "expfamily":
        unknown = [f for f in ac.features if f not in FEATURES]
        if unknown or not ac.features:
            raise ConfigError(f"[ansatz] features must be chosen from {', '.join(FEATURES)}")
        return ExpFamilyAnsatz(system.space, [FEATURES[f]() for f in ac.features])
    return MlpAnsatz(system.space, ac.hidden, ac.activation)


def initial_theta(cfg: ExperimentConfig, ansatz, seed: int) -> np.ndarray:
    init = cfg.ansatz.init
    if isinstance(ansatz, (MlpAnsatz, MatrixMlpAnsatz)) and not init:
        return ansatz.init_params(make_rng(seed, STREAM_INIT))
    d = ansatz.num_params
    if not init:
        if isinstance(ansatz, TableAnsatz):
            return np.arange(1, d + 1, dtype=float) / d
        return np.ones(d)
    if len(init) != d:
        raise ConfigError(f"[ansatz] init has {len(init)} values, ansatz needs {d}")
    return np.array(init, dtype=float)


def exact_energy_fn(system: System, ansatz):
    """Closed-form energies of single-feature exponential ansatze."""
    if not isinstance(ansatz, ExpFamilyAnsatz) or len(ansatz.features) != 1:
        return None
    name = ansatz.features[0].name
    if system.kind == "ho1d" and name == "gaussian":
        return lambda t: t[0] / 4 + 1 / (4 * t[0])
    if system.kind == "hatom" and name == "radial":
        return lambda t: t[0] ** 2 / 2 - t[0]
    return None


def schedule_of(cfg: ExperimentConfig) -> Schedule:
    o = cfg.optim
    return Schedule(o.schedule, o.eta0, o.n, o.m0)


def _meta(cfg: ExperimentConfig, sampling: str, extra: Optional[dict] = None) -> dict:
    o = cfg.optim
    meta = {
        "system": cfg.system.kind,
        "ansatz": cfg.ansatz.kind,
        "sampling": sampling,
        "n": o.n,
        "schedule": f"{o.schedule} eta0={o.eta0!r} m0={o.m0!r}",
        "steps": o.steps,
        "seed": cfg.run.seed,
    }
    meta.update(extra or {})
    return meta


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.run.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _slope_text(series) -> str:
    try:
        fit = loglog_slope(running_min(series))
        return f"{fit.slope:.4f} (burn-in {fit.burn_in_step}, {fit.n_points} points)"
    except DiagnosticsError as exc:
        return f"n/a ({exc})"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_verify(inject: Optional[str] = None) -> int:
    results = run_checks(inject)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + "; ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_vmc_run(cfg: ExperimentConfig) -> int:
    system = System(cfg)
    if system.kind == "pretrain_toy":
        raise ConfigError("vmc-run needs a finite, ho1d or hatom system")
    ansatz = build_ansatz(cfg, system)
    theta0 = initial_theta(cfg, ansatz, cfg.run.seed)
    sc = cfg.sampler
    if system.kind == "finite":
        if sc.kind != "exact":
            raise ConfigError("finite systems sample exactly; set [sampler] kind = exact")
        sampler, sampling = "exact", "exact"
    else:
        if sc.kind != "metropolis":
            raise ConfigError("continuous systems need [sampler] kind = metropolis")
        sampler = MetropolisSampler(system.space, cfg.optim.n, make_rng(cfg.run.seed, STREAM_MCMC),
                                    sc.step_size if sc.step_size > 0 else None, sc.burn_in, sc.thinning)
        sampling = f"metropolis burn_in={sc.burn_in} thinning={sc.thinning}"
    problem = VmcProblem(system.hamiltonian, ansatz, theta0, cfg.optim.n, schedule_of(cfg),
                         cfg.optim.steps, cfg.run.seed, sampler, exact_energy_fn(system, ansatz))
    state, rows = vmc_train(problem)
    out = _out_dir(cfg)
    extra = {}
    if system.exact_ground is not None:
        extra["ground_energy"] = repr(float(system.exact_ground))
    write_trace(out / "vmc.csv", rows, "vmc", _meta(cfg, sampling, extra))
    save_parameters(out / "params.txt", ansatz.kind, state.theta, cfg.run.seed)
    last = rows[-1]
    energy = last.energy_exact if last.energy_exact is not None else last.energy_est
    lines = [f"status        {state.status}", f"steps         {len(rows)}",
             f"final energy  {energy!r}"]
    if system.exact_ground is not None and energy is not None and math.isfinite(energy):
        lines.append(f"ground energy {system.exact_ground!r}")
        lines.append(f"energy gap    {abs(energy - system.exact_ground):.6g}")
    lines.append(f"theta         {' '.join(repr(float(t)) for t in state.theta[:8])}"
                 + (" ..." if state.theta.size > 8 else ""))
    lines.append(f"runmin slope  {_slope_text([r.grad_norm for r in rows if r.grad_norm is not None])}")
    if state.status != "ok":
        lines.append(f"diverged: {state.message}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if state.status == "ok" else EXIT_DIVERGED


def _continuous_target(cfg: ExperimentConfig, system: System) -> Target:
    box = system.space
    phi = system.ground_state
    if cfg.pretrain.rho == "target":
        rho = TargetInduced(phi, box)
        ev = RhoSampler(rho, EVAL_SAMPLES, make_rng(cfg.run.seed, STREAM_EVAL)).draw().points
        return Target(phi, rho, eval_points=ev)
    rho = Lebesgue(box)
    if box.dim == 1:
        ev = np.linspace(box.lower[0], box.upper[0], EVAL_GRID)[:, None]
    else:
        ev = RhoSampler(rho, EVAL_SAMPLES, make_rng(cfg.run.seed, STREAM_EVAL)).draw().points
    return Target(phi, rho, eval_points=ev)


def _align_sign(ansatz, theta0, target: Target) -> np.ndarray:
    """Flip the output scale of a network so its initial overlap with the target is positive."""
    if not isinstance(ansatz, MlpAnsatz):
        return theta0
    pts = target.eval_points
    if float(np.dot(ansatz.value(theta0, pts), target.values(pts))) < 0:
        theta0 = theta0.copy()
        theta0[ansatz.scale_index] *= -1
    return theta0


def _finite_target(cfg: ExperimentConfig, system: System) -> Target:
    s = system.space.size
    if cfg.pretrain.target == "ground":
        phi = system.ground_state
    else:
        v = make_rng(cfg.run.seed, STREAM_TARGET, 1).standard_normal(s)
        phi = v / np.linalg.norm(v)
    return Target(phi, FiniteWeights.uniform(s))


def _orbital_problem(cfg: ExperimentConfig, system: System, ansatz, seed: int, loss: str) -> OrbitalProblem:
    return OrbitalProblem(ansatz, hermite_orbitals(cfg.system.n_orbitals), system.space,
                          initial_theta(cfg, ansatz, seed), cfg.optim.n, schedule_of(cfg),
                          cfg.optim.steps, loss=loss, optimizer=cfg.optim.optimizer,
                          rho=cfg.pretrain.rho, seed=seed, burn_in=cfg.sampler.burn_in,
                          thinning=cfg.sampler.thinning)


def _orbital_meta(cfg: ExperimentConfig, loss: str, seed: int) -> dict:
    meta = _meta(cfg, cfg.pretrain.rho, {"loss": loss, "optimizer": cfg.optim.optimizer})
    meta["seed"] = seed
    return meta


def cmd_pretrain_run(cfg: ExperimentConfig) -> int:
    system = System(cfg)
    ansatz = build_ansatz(cfg, system)
    out = _out_dir(cfg)
    if system.kind == "pretrain_toy":
        problem = _orbital_problem(cfg, system, ansatz, cfg.run.seed, cfg.pretrain.loss)
        state, rows = orbital_pretrain(problem)
        write_trace(out / "pretrain.csv", rows, "orbital", _orbital_meta(cfg, cfg.pretrain.loss, cfg.run.seed))
        lines = [f"status        {state.status}", f"loss          {cfg.pretrain.loss}",
                 f"final angle   {rows[-1].angle!r}"]
    else:
        theta0 = initial_theta(cfg, ansatz, cfg.run.seed)
        if system.kind == "finite":
            target = _finite_target(cfg, system)
            sampling = "finite-weights uniform"
            floor = -norm(target.phi, target.rho)
        else:
            target = _continuous_target(cfg, system)
            sampling = cfg.pretrain.rho
            floor = None
            theta0 = _align_sign(ansatz, theta0, target)
        pc = cfg.pretrain
        problem = PretrainProblem(ansatz, target, theta0, cfg.optim.n, schedule_of(cfg), cfg.optim.steps,
                                  cfg.run.seed, pc.strategy, pc.period, cfg.sampler.burn_in,
                                  cfg.sampler.thinning)
        state, rows = pretrain_train(problem)
        extra = {"strategy": pc.strategy if pc.strategy != "periodic" else f"periodic K={pc.period}"}
        if floor is not None:
            extra["loss_floor"] = repr(float(floor))
        write_trace(out / "pretrain.csv", rows, "pretrain", _meta(cfg, sampling, extra))
        last = rows[-1]
        lines = [f"status        {state.status}", f"steps         {len(rows)}",
                 f"final angle   {last.angle!r}", f"final si_loss {last.si_loss!r}"]
        if last.loss_exact is not None:
            lines.append(f"final loss    {last.loss_exact!r}")
        lines.append(f"runmin slope  {_slope_text([r.grad_norm for r in rows if r.grad_norm is not None])}")
    save_parameters(out / "params.txt", ansatz.kind, state.theta, cfg.run.seed)
    if state.status != "ok":
        lines.append(f"diverged: {state.message}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if state.status == "ok" else EXIT_DIVERGED


def cmd_compare_pretrain(cfg: ExperimentConfig) -> int:
    system = System(cfg)
    if system.kind != "pretrain_toy":
        raise ConfigError("compare-pretrain needs [system] kind = pretrain_toy")
    ansatz = build_ansatz(cfg, system)
    out = _out_dir(cfg)
    finals = {"si": [], "mse": []}
    status = EXIT_OK
    lines = ["seed  si_angle  mse_angle"]
    for r in range(cfg.pretrain.repeats):
        seed = cfg.run.seed + r
        eval_points = None
        for loss in ("si", "mse"):
            problem = _orbital_problem(cfg, system, ansatz, seed, loss)
            if eval_points is None:
                eval_points = orbital_eval_set(problem)
            state, rows = orbital_pretrain(problem, eval_points)
            write_trace(out / f"compare_{loss}_seed{seed}.csv", rows, "orbital",
                        _orbital_meta(cfg, loss, seed))
            finals[loss].append(rows[-1].angle if state.status == "ok" else math.nan)
            if state.status != "ok":
                status = EXIT_DIVERGED
        lines.append(f"{seed:<5} {finals['si'][-1]:.6f}  {finals['mse'][-1]:.6f}")
    med = {k: statistics.median(v) for k, v in finals.items()}
    lines.append(f"median final sin-angle: si {med['si']:.6f}  mse {med['mse']:.6f}")
    lines.append("scale-invariant loss " + ("<=" if med["si"] <= med["mse"] else ">") + " MSE loss")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return status


def _column(trace, name):
    if name not in trace.data:
        return None
    values = trace.data[name]
    steps = trace.data["step"]
    pairs = [(s, v) for s, v in zip(steps, values) if v is not None]
    if not pairs:
        return None
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _ledger_text(trace) -> Optional[str]:
    """Theorem ledger from a trace that carries exact gradients and a loss floor."""
    g = _column(trace, "grad_norm_exact")
    loss_col = "energy_exact" if trace.kind == "vmc" else "loss_exact"
    loss = _column(trace, loss_col)
    floor_key = "ground_energy" if trace.kind == "vmc" else "loss_floor"
    if g is None or loss is None or floor_key not in trace.meta or len(g[1]) < 4:
        return None
    etas = [trace.data["eta"][int(i)] for i in g[0]]
    n = int(trace.meta.get("n", "1"))
    rep = theorem_ledger(g[1], etas, n, loss[1][0], float(trace.meta[floor_key]))
    return rep.text()


def cmd_report(paths: List[str], out: Path) -> int:
    traces = [read_trace(p) for p in paths]
    out.mkdir(parents=True, exist_ok=True)
    lines, runmin_series, lip_series, angle_series = [], [], [], []
    for tr in traces:
        label = Path(tr.path).stem
        lines.append(f"== {tr.path} (kind {tr.kind})")
        for k, v in tr.meta.items():
            if k != "kind":
                lines.append(f"   {k}: {v}")
        g = _column(tr, "grad_norm")
        if g is not None:
            rm = list(running_min(g[1]))
            slope = _slope_text(g[1])
            lines.append(f"   runmin |G| slope: {slope}")
            runmin_series.append(Series(f"{label} slope {slope.split()[0]}", g[0], rm))
        lip = _column(tr, "lipschitz_est")
        if lip is not None:
            lines.append(f"   max Lipschitz estimate: {max(lip[1]):.6g}")
            lip_series.append(Series(label, lip[0], lip[1]))
        ang = _column(tr, "angle")
        if ang is not None:
            lines.append(f"   final sin-angle: {ang[1][-1]:.6g}")
            angle_series.append(Series(label, ang[0], ang[1]))
        ledger = _ledger_text(tr)
        if ledger is not None:
            lines.append("   theorem ledger:")
            lines.extend("     " + ln for ln in ledger.splitlines())
    plots = [
        ("runmin.svg", runmin_series, "Running minimum of |G|", "|G| (running min)", True, True),
        ("lipschitz.svg", lip_series, "Lipschitz estimate", "|dG|/|dtheta|", True, True),
        ("angle.svg", angle_series, "Sine of angle to target", "sin angle", True, True),
    ]
    for name, series, title, ylabel, logx, logy in plots:
        if series:
            # step 0 cannot sit on a log axis; plot against step + 1
            shifted = [Series(s.label, [x + 1 for x in s.x], s.y) for s in series]
            (out / name).write_text(line_plot(shifted, title, "step + 1", ylabel, logx, logy))
            lines.append(f"wrote {out / name}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmckit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the oracle and invariant self-checks")
    v.add_argument("--inject", choices=INJECTIONS, help="deliberately break one ingredient")
    for name, helptext in (("vmc-run", "energy minimization"),
                           ("pretrain-run", "supervised pre-training"),
                           ("compare-pretrain", "scale-invariant vs MSE orbital pre-training")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("config", nargs="?", help="INI config file (defaults when omitted)")
        c.add_argument("--seed", type=int)
        c.add_argument("--out")
        c.add_argument("--threads", type=int)
    r = sub.add_parser("report", help="plots and text report from trace CSVs")
    r.add_argument("traces", nargs="+")
    r.add_argument("--out", default="report")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.output = args.out
    if args.threads is not None:
        cfg.run.threads = args.threads
    cfg.validate()
    set_threads(cfg.run.threads)
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.inject)
        if args.command == "report":
            return cmd_report(args.traces, Path(args.out))
        cfg = _load(args)
        cmd = {"vmc-run": cmd_vmc_run, "pretrain-run": cmd_pretrain_run,
               "compare-pretrain": cmd_compare_pretrain}[args.command]
        return cmd(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
