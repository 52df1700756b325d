"""Command-line entry point: ``tilt-matching {run,verify,metrics}``.

Exit codes: 0 success, 1 failed verification, 2 invalid configuration or
arguments, 3 runtime abort. ``TM_NUM_THREADS`` sets the worker-pool size used
for batched ODE integration.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .anneal import AnnealAbort, TiltProblem, distill_velocity, pretrain_flow_matching, run_anneal, substream
from .config import ConfigError, RunConfig, load_config
from .interpolant import make_linear_schedule
from .metrics import MetricsReport, energy_w2, histogram
from .sampler import importance_weights, integrate_ode, mala_refine, read_samples, write_samples
from .targets import (
    LennardJonesSpec, circle_gmm, double_well_target, gaussian_target, interatomic_distances,
    lennard_jones_target, linear_reward, quadratic_reward, standard_normal, temperature_path,
    tilted_gaussian_target, zero_reward,
)
from .velocity import GridVelocity, MlpVelocity, analytic_gaussian_tilted, save_checkpoint
from .verify import format_table, run_checks

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _lj_spec(cfg: RunConfig) -> LennardJonesSpec:
    t = cfg.target
    return LennardJonesSpec(t.n_particles, t.epsilon, t.r_m, t.tau, t.harmonic, t.lj_form)


def build_problem(cfg: RunConfig):
    """Return ``(problem, reference_target)``; the reference is the ``a = 1`` law
    when it can be sampled exactly, else ``None``."""
    t, r = cfg.target, cfg.reward
    if t.kind == "gaussian":
        d = len(t.mean)
        target = gaussian_target(np.array(t.mean), np.array(t.cov).reshape(d, d))
    elif t.kind == "gmm":
        target = circle_gmm(t.n_modes, t.radius, t.std)
    elif t.kind == "double_well":
        target = double_well_target(t.scale)
    else:
        target = lennard_jones_target(_lj_spec(cfg))
    d = target.dim
    reference = None
    if r.kind == "temperature":
        prior, reward = temperature_path(target, r.temperature)
        reference = target if target.sampler is not None else None
    else:
        if r.kind == "linear":
            reward = linear_reward(np.array(r.c))
        elif r.kind == "quadratic":
            reward = quadratic_reward(np.array(r.Q).reshape(d, d), np.array(r.c))
        else:
            reward = zero_reward(d)
        prior = target
        if t.kind == "gaussian":
            reference = tilted_gaussian_target(target.params["mean"], target.params["cov"], reward, 1.0)
    problem = TiltProblem(standard_normal(d), prior, reward, make_linear_schedule())
    return problem, reference


def _prior_samples(cfg: RunConfig, problem: TiltProblem, rng) -> np.ndarray:
    n = cfg.model.prior_samples
    if problem.prior.sampler is not None:
        return problem.prior.sampler(rng, n)
    if problem.prior.score is None:
        raise ConfigError("[model] pretrain: prior has neither a sampler nor a score for MALA")
    init = 2.0 * rng.standard_normal((n, problem.dim))
    return mala_refine(init, problem.prior.log_density, problem.prior.score, 0.1, 300, rng,
                       n_warmup=100).points


def build_model(cfg: RunConfig, problem: TiltProblem):
    m, d, seed = cfg.model, problem.dim, cfg.experiment.seed
    if m.backend == "analytic":
        p = problem.prior.params
        return analytic_gaussian_tilted(np.zeros(d), np.eye(d), p["mean"], p["cov"], problem.schedule,
                                        0.0, problem.reward)
    if m.backend == "grid":
        model = GridVelocity(d, m.grid_n_t, m.grid_n_x, [m.grid_lo] * d, [m.grid_hi] * d)
    else:
        model = MlpVelocity(d, hidden=m.hidden, activation=m.activation, seed=seed)
    mode = m.pretrain
    if mode == "auto":
        mode = "distill" if cfg.target.kind == "gaussian" and cfg.reward.kind != "temperature" else "flow_matching"
    rng = substream(seed, "pretrain")
    if mode == "distill":
        p = problem.prior.params
        reference = analytic_gaussian_tilted(np.zeros(d), np.eye(d), p["mean"], p["cov"], problem.schedule,
                                             0.0, problem.reward)

        def sample_x(rng_, t):
            al, be, _, _ = problem.schedule.coefficients(t)
            x0 = problem.base.sampler(rng_, t.size)
            x1 = problem.prior.sampler(rng_, t.size)
            return al[:, None] * x0 + be[:, None] * x1

        distill_velocity(model, reference, sample_x, m.pretrain_steps, m.pretrain_batch, rng, m.pretrain_lr)
    elif mode == "flow_matching":
        samples = _prior_samples(cfg, problem, rng)
        pretrain_flow_matching(model, problem, m.pretrain_steps, m.pretrain_batch, rng, m.pretrain_lr,
                               target_samples=samples)
    return model


def cmd_run(config_path, output=None) -> int:
    try:
        cfg = load_config(config_path)
        anneal_cfg = cfg.anneal_config()
        problem, reference = build_problem(cfg)
        out = Path(output or cfg.experiment.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "run.cfg")
        model = build_model(cfg, problem)
    except ValueError as exc:  # ConfigError, or an invalid tilt of the prior
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trace_path = out / "trace.jsonl"
    trace_path.write_text("")
    try:
        result = run_anneal(anneal_cfg, problem, model, trace_path=trace_path, measure_final_ess=False)
    except AnnealAbort as exc:
        print(f"run aborted: {exc}; trace kept at {trace_path}", file=sys.stderr)
        return EXIT_ABORT
    save_checkpoint(result.model, out / "model.tmck")

    mc = cfg.metrics
    rng = substream(cfg.experiment.seed, "final")
    x0 = problem.base.sampler(rng, mc.n_samples)
    traj = integrate_ode(result.model, x0, mc.ode_steps, with_likelihood=True, method=mc.integrator, rng=rng)
    ok = ~traj.failed
    x1 = traj.x1[ok]
    write_samples(out / f"samples.{mc.dump_format}", x1, mc.dump_format)
    log_p = problem.base.log_density(traj.x0[ok]) + traj.log_det[ok]
    ws = importance_weights(x1, log_p, problem.log_target(1.0)(x1))

    report = MetricsReport(cfg.experiment.name, ess=ws.ess, trace_path=str(trace_path))
    report.values["n_levels"] = len(result.trace)
    report.values["n_failed"] = int(traj.failed.sum())
    for j in range(x1.shape[1]):
        report.values[f"mean_{j}"] = float(x1[:, j].mean())
        report.values[f"var_{j}"] = float(x1[:, j].var())
    energy = lambda x: -problem.log_target(1.0)(x)
    report.values["mean_energy"] = float(np.mean(energy(x1)))
    refined = None
    score = problem.score_target(1.0)
    if anneal_cfg.mala_steps > 0 and score is not None:
        # ESS needs the model density, so it is only defined for the raw samples
        mala = mala_refine(x1, problem.log_target(1.0), score, anneal_cfg.mala_step_size,
                           anneal_cfg.mala_steps, substream(cfg.experiment.seed, "final_mala"),
                           n_warmup=anneal_cfg.mala_warmup)
        refined = mala.points
        report.values["mala_acceptance"] = mala.acceptance_rate
        report.values["mala_mean_energy"] = float(np.mean(energy(refined)))
    if reference is not None:
        ref_samples = reference.sampler(substream(cfg.experiment.seed, "reference"), mc.n_samples)
        report.energy_w2 = energy_w2(x1, ref_samples, energy)
        if refined is not None:
            report.values["mala_energy_w2"] = energy_w2(refined, ref_samples, energy)
        if reference.params.get("mean") is not None and "cov" in reference.params:
            for j in range(x1.shape[1]):
                report.values[f"analytic_mean_{j}"] = float(reference.params["mean"][j])
                report.values[f"analytic_var_{j}"] = float(reference.params["cov"][j, j])
    if cfg.target.kind == "lennard_jones":
        dists = interatomic_distances(_lj_spec(cfg), x1)
        report.values["mean_distance"] = float(dists.mean())
        report.distance_hist = histogram(dists, bins=100, value_range=(0.0, 6.0))
        report.write_distance_hist(out / "distance_hist.csv")
    report.write_csv(out / "metrics.csv")
    print(f"wrote {out / 'metrics.csv'} (final ESS {ws.ess:.4f})")
    return EXIT_OK


def cmd_verify(filters=None, corrupt_sigma: float | None = None, seed: int = 0) -> int:
    keys = None
    if filters:
        keys = [k for f in filters for k in f.split(",") if k]
    try:
        results = run_checks(keys, seed=seed, sigma_scale=1.0 if corrupt_sigma is None else corrupt_sigma)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _metrics_energy(target: str):
    named = {
        "identity": None,
        "gmm": circle_gmm(),
        "double_well": double_well_target(),
        "lj13": lennard_jones_target(LennardJonesSpec()),
    }
    if target in named:
        tgt = named[target]
        return None if tgt is None else (lambda x: -tgt.log_density(x))
    path = Path(target)
    if path.exists():
        problem, _ = build_problem(load_config(path))
        return lambda x: -problem.log_target(1.0)(x)
    raise ConfigError(f"unknown --target {target!r}; use one of {sorted(named)} or a config path")


def cmd_metrics(samples_a, samples_b, target: str = "identity") -> int:
    try:
        energy = _metrics_energy(target)
        a, b = read_samples(samples_a), read_samples(samples_b)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if energy is None and (a.shape[1] != 1 or b.shape[1] != 1):
        print("error: identity energy needs one-column sample files", file=sys.stderr)
        return EXIT_CONFIG
    print(f"energy_w2,{energy_w2(a, b, energy)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilt-matching",
                                     description="Tilt-matching experiments, oracle checks and metrics.")
    sub = parser.add_subparsers(dest="command")
    p_run = sub.add_parser("run", help="run an annealing experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None, help="output directory (overrides the config)")
    p_ver = sub.add_parser("verify", help="run the oracle-backed identity checks")
    p_ver.add_argument("--filter", action="append", default=None,
                       help="check keys to run, e.g. prop7 or prop1,cv (repeatable)")
    p_ver.add_argument("--corrupt-sigma", type=float, default=None,
                       help="debug: scale sigma_t^2 in the drift identity check")
    p_ver.add_argument("--seed", type=int, default=0)
    p_met = sub.add_parser("metrics", help="energy W2 between two sample dumps")
    p_met.add_argument("samples_a")
    p_met.add_argument("samples_b")
    p_met.add_argument("--target", default="identity")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    if args.command is None:
        parser.print_help()
        return EXIT_OK
    if args.command == "run":
        return cmd_run(args.config, args.output)
    if args.command == "verify":
        return cmd_verify(args.filter, args.corrupt_sigma, args.seed)
    return cmd_metrics(args.samples_a, args.samples_b, args.target)


if __name__ == "__main__":
    sys.exit(main())
