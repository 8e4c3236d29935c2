"""Brownian-dynamics oracle for the diffusive link.

Independent check of the closed-form capture probability: molecules are
simulated as non-interacting particles started at the origin and stepped
with the Euler-Maruyama scheme

    x_{n+1} = x_n + v dt e_x + sqrt(2 D dt) xi,   xi ~ N(0, I_3),

and the fraction of particles found inside the receiver sphere at each
probe time is the empirical presence probability. No expression from
:mod:`mclink.channel` enters the dynamics; the analytic column of the
exported curve is the only point of contact.

Particles are independent, so the population is split into fixed-size
shards with per-shard generators seeded as SeedSequence((seed, shard)).
The shard decomposition does not depend on the worker count, so results
are identical whether shards run sequentially or in a process pool.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from .channel import ChannelParams, capture_probability

SHARD_SIZE = 20_000


@dataclass(frozen=True)
class ParticleSimConfig:
    """Monte Carlo settings for one presence-probability run."""

    n_particles: int
    dt: float                      # integration step (s)
    t_max: float                   # horizon (s)
    record_times: tuple[float, ...]  # probe instants, each in (0, t_max]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_particles < 1_000:
            raise ValueError("n_particles must be at least 1000 for a usable estimate")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        times = tuple(float(t) for t in self.record_times)
        if not times:
            raise ValueError("record_times must not be empty")
        if any(not 0 < t <= self.t_max for t in times):
            raise ValueError("record_times must lie in (0, t_max]")
        if self.dt >= min(times):
            raise ValueError("dt must be smaller than the earliest record time")
        object.__setattr__(self, "record_times", times)


def default_sim_config(scenario_name: str, n_particles: int = 100_000, seed: int = 0) -> ParticleSimConfig:
    """Per-scenario defaults: probe grid bracketing the capture peak.

    The fast-drift scenario needs a far finer step and a narrow probe
    window around the ballistic arrival, where the presence probability is
    non-negligible.
    """
    if scenario_name == "scenario2":
        return ParticleSimConfig(
            n_particles=n_particles,
            dt=1e-5,
            t_max=1.5005,
            record_times=(1.4995, 1.4998, 1.5, 1.5002, 1.5005),
            seed=seed,
        )
    return ParticleSimConfig(
        n_particles=n_particles,
        dt=1e-3,
        t_max=4.0,
        record_times=(0.5, 1.0, 1.2585, 2.0, 4.0),
        seed=seed,
    )


def _record_steps(cfg: ParticleSimConfig) -> list[int]:
    """Probe times snapped to the nearest integer step (dedup, sorted)."""
    steps = sorted({max(1, int(round(t / cfg.dt))) for t in cfg.record_times})
    return steps


def _run_shard(args) -> np.ndarray:
    """Inside-sphere counts at each record step for one particle shard."""
    seed, shard_index, n, dt, record_steps, velocity, diffusion, distance, radius = args
    rng = np.random.default_rng(np.random.SeedSequence((seed, shard_index)))
    pos = np.zeros((n, 3))
    drift = velocity * dt
    sigma = math.sqrt(2.0 * diffusion * dt)
    r2 = radius * radius
    counts = np.zeros(len(record_steps), dtype=np.int64)
    targets = {step: i for i, step in enumerate(record_steps)}
    for step in range(1, record_steps[-1] + 1):
        pos += sigma * rng.standard_normal((n, 3))
        pos[:, 0] += drift
        if step in targets:
            dx = pos[:, 0] - distance
            dist2 = dx * dx + pos[:, 1] ** 2 + pos[:, 2] ** 2
            counts[targets[step]] = int(np.count_nonzero(dist2 <= r2))
    return counts


def simulate_presence(
    cfg: ParticleSimConfig, p: ChannelParams, n_workers: int = 1
) -> list[tuple[float, float]]:
    """Empirical probability of presence in the receiver sphere.

    Returns (t, fraction) pairs, one per probe time, with t the realized
    (step-aligned) instant. Deterministic for a fixed seed regardless of
    ``n_workers``.
    """
    record_steps = _record_steps(cfg)
    shard_sizes = []
    remaining = cfg.n_particles
    while remaining > 0:
        shard_sizes.append(min(SHARD_SIZE, remaining))
        remaining -= shard_sizes[-1]
    jobs = [
        (cfg.seed, i, size, cfg.dt, record_steps,
         p.velocity_um_s, p.diffusion_um2_s, p.distance_um, p.radius_um)
        for i, size in enumerate(shard_sizes)
    ]
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            counts = list(pool.map(_run_shard, jobs))
    else:
        counts = [_run_shard(job) for job in jobs]
    totals = np.sum(counts, axis=0)
    return [(step * cfg.dt, totals[i] / cfg.n_particles) for i, step in enumerate(record_steps)]


def empirical_capture_curve(
    cfg: ParticleSimConfig, p: ChannelParams, n_workers: int = 1
) -> list[tuple[float, float, float, float]]:
    """Empirical vs analytic capture probability over the probe grid.

    Rows are (t, p_empirical, p_analytic, rel_err) with the analytic value
    evaluated at the realized probe instant.
    """
    rows = []
    for t, emp in simulate_presence(cfg, p, n_workers=n_workers):
        analytic = capture_probability(p, t)
        rel_err = abs(emp - analytic) / analytic
        rows.append((t, emp, analytic, rel_err))
    return rows


def write_capture_csv(path, curve, cfg: ParticleSimConfig, p: ChannelParams) -> None:
    """CSV export plus an adjacent .meta.json echoing seed and config."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_s,p_empirical,p_analytic,rel_err\n")
        for t, emp, analytic, rel in curve:
            fh.write(f"{float(t)!r},{float(emp)!r},{float(analytic)!r},{float(rel)!r}\n")
    meta = {"config": asdict(cfg), "channel": asdict(p)}
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def displacement_moments(
    cfg: ParticleSimConfig, p: ChannelParams
) -> list[tuple[float, float, float]]:
    """Mean x displacement and per-axis variance at each probe time.

    Diagnostic for the integrator: expectations are v*t and 2*D*t.
    Uses the same stepping as the presence run but a single shard.
    """
    record_steps = _record_steps(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    n = min(cfg.n_particles, SHARD_SIZE)
    pos = np.zeros((n, 3))
    drift = p.velocity_um_s * cfg.dt
    sigma = math.sqrt(2.0 * p.diffusion_um2_s * cfg.dt)
    targets = {step: i for i, step in enumerate(record_steps)}
    out: list[tuple[float, float, float]] = [None] * len(record_steps)  # type: ignore[list-item]
    for step in range(1, record_steps[-1] + 1):
        pos += sigma * rng.standard_normal((n, 3))
        pos[:, 0] += drift
        if step in targets:
            t = step * cfg.dt
            out[targets[step]] = (t, float(pos[:, 0].mean()), float(pos.var(axis=0, ddof=1).mean()))
    return out
