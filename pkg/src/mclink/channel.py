"""Closed-form physics of a diffusive molecular link with uniform drift.

A point transmitter at the origin releases up to ``max_molecules`` identical
molecules at the start of each symbol slot. They spread through an unbounded
3-D fluid with diffusion coefficient D and uniform flow v along the x axis.
A passive spherical receiver of radius r centered at distance R on the x axis
counts the molecules found inside its volume at an observation instant.

The probability that one released molecule is inside the receiver sphere a
time t after release is approximated by the free-space Green's function
integrated over the (small) receiver volume:

    P(t) = V_r / (4 pi D t)^(3/2) * exp(-(R - v t)^2 / (4 D t)),
    V_r  = 4 pi r^3 / 3.

Counts are Binomial(n_released, P(t)), taken Gaussian when the expected
count is large. A slot observation adds the residue of the previous
``memory`` slots (inter-symbol interference) and additive Gaussian counting
noise, clamped at zero.

All operations are pure; randomness enters only through an explicitly
supplied ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, fields

import numpy as np

# Below this expected count the slot sampler draws the exact binomial;
# above it the Gaussian approximation is used.
GAUSSIAN_COUNT_THRESHOLD = 30.0

# The additive counting-noise level (molecules) used when a scenario does
# not specify one.
DEFAULT_NOISE_STD = 10.0


class InvalidApproximationError(ValueError):
    """Capture probability left its validity region (computed P > 1)."""


@dataclass(frozen=True)
class ChannelParams:
    """Physical description of one molecular link.

    Lengths in micrometers, times in seconds, counts in molecules.
    """

    distance_um: float          # Tx-Rx separation
    radius_um: float            # receiver sphere radius
    velocity_um_s: float        # drift speed along x (>= 0)
    slot_s: float               # symbol slot duration
    diffusion_um2_s: float      # diffusion coefficient
    max_molecules: int          # per-slot molecule budget
    noise_std: float = DEFAULT_NOISE_STD   # additive count noise (std, molecules)
    memory: int = 1             # ISI memory length in slots
    observe_at_s: float | None = None      # in-slot observation instant; None = min(peak, slot)

    def __post_init__(self) -> None:
        if not self.distance_um > 0:
            raise ValueError("distance_um must be positive")
        if not self.radius_um > 0:
            raise ValueError("radius_um must be positive")
        if not self.radius_um < self.distance_um:
            raise ValueError("receiver radius must be smaller than the Tx-Rx distance")
        if self.velocity_um_s < 0:
            raise ValueError("velocity_um_s must be non-negative")
        if not self.slot_s > 0:
            raise ValueError("slot_s must be positive")
        if not self.diffusion_um2_s > 0:
            raise ValueError("diffusion_um2_s must be positive")
        if int(self.max_molecules) != self.max_molecules or self.max_molecules < 1:
            raise ValueError("max_molecules must be a positive integer")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.memory < 0:
            raise ValueError("memory must be non-negative")
        if self.observe_at_s is not None and not 0 < self.observe_at_s <= self.slot_s:
            raise ValueError("observe_at_s must lie in (0, slot_s]")

    def receiver_volume_um3(self) -> float:
        return 4.0 * math.pi * self.radius_um ** 3 / 3.0

    def observation_time(self) -> float:
        """Observation instant within a slot.

        Defaults to the capture-probability peak, capped at the slot length,
        so the deterministic default maximizes the signal term.
        """
        if self.observe_at_s is not None:
            return self.observe_at_s
        return min(peak_time(self), self.slot_s)


# Table of built-in link scenarios (distances/velocities in um, um/s).
_SCENARIOS: dict[str, ChannelParams] = {
    # short-range, slow flow: diffusion dominates, strong ISI
    "scenario1": ChannelParams(
        distance_um=100.0, radius_um=20.0, velocity_um_s=50.0,
        slot_s=4.0, diffusion_um2_s=800.0, max_molecules=20_000,
    ),
    # long-range, fast flow: advection dominates, ISI clears between slots
    "scenario2": ChannelParams(
        distance_um=60e4, radius_um=20.0, velocity_um_s=40e4,
        slot_s=3.0, diffusion_um2_s=800.0, max_molecules=20_000,
    ),
}


def scenario(name: str) -> ChannelParams:
    """Look up a built-in scenario by name ('scenario1', 'scenario2')."""
    try:
        return _SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(_SCENARIOS)}") from None


def scenario_names() -> tuple[str, ...]:
    return tuple(sorted(_SCENARIOS))


def save_params(path, p: ChannelParams) -> None:
    """Write channel parameters as a flat 'key = value' text file."""
    lines = ["# molecular link parameters\n"]
    for f in fields(ChannelParams):
        value = getattr(p, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {value!r}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_params(path_or_name: str) -> ChannelParams:
    """Load parameters from a built-in scenario name or a key=value file."""
    if path_or_name in _SCENARIOS:
        return _SCENARIOS[path_or_name]
    raw: dict[str, float] = {}
    try:
        fh = open(path_or_name, "r", encoding="utf-8")
    except OSError:
        raise KeyError(
            f"{path_or_name!r} is neither a built-in scenario nor a readable file"
        ) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path_or_name}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            raw[key.strip()] = float(value.strip())
    known = {f.name for f in fields(ChannelParams)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{path_or_name}: unknown parameter(s) {sorted(unknown)}")
    if "max_molecules" in raw:
        raw["max_molecules"] = int(raw["max_molecules"])
    if "memory" in raw:
        raw["memory"] = int(raw["memory"])
    return ChannelParams(**raw)  # type: ignore[arg-type]


class SymbolSequence:
    """Ordered release fractions for one frame, each in [0, 1]."""

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        vals = tuple(float(v) for v in values)
        if len(vals) < 1:
            raise ValueError("a frame carries at least one symbol")
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"release fraction {v} outside [0, 1]")
        object.__setattr__(self, "values", vals)

    def __setattr__(self, name, value):
        raise AttributeError("SymbolSequence is immutable")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolSequence) and self.values == other.values

    def __repr__(self) -> str:
        return f"SymbolSequence({list(self.values)!r})"


def _as_sequence(w) -> SymbolSequence:
    return w if isinstance(w, SymbolSequence) else SymbolSequence(w)


def capture_probability(p: ChannelParams, t: float) -> float:
    """Probability that a molecule released at t=0 sits inside the receiver at t.

    Evaluated in log space so the t -> 0 limit underflows cleanly to 0
    instead of producing inf * 0.
    """
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")
    log_vr = math.log(p.receiver_volume_um3())
    log_norm = 1.5 * math.log(4.0 * math.pi * p.diffusion_um2_s * t)
    displacement = p.distance_um - p.velocity_um_s * t
    exponent = -(displacement * displacement) / (4.0 * p.diffusion_um2_s * t)
    log_p = log_vr - log_norm + exponent
    if log_p > 0.0:
        raise InvalidApproximationError(
            f"capture probability exp({log_p:.3g}) > 1 at t={t}; the uniform-"
            "concentration approximation is invalid for these parameters"
        )
    return math.exp(log_p)


def peak_time(p: ChannelParams) -> float:
    """Instant at which the capture probability is maximal.

    Setting d/dt log P = 0 gives v^2 t^2 + 6 D t - R^2 = 0; the positive
    root is returned (R^2 / 6D in the drift-free limit).
    """
    d, v, r = p.diffusion_um2_s, p.velocity_um_s, p.distance_um
    if v == 0.0:
        return r * r / (6.0 * d)
    disc = math.sqrt(36.0 * d * d + 4.0 * v * v * r * r)
    return (disc - 6.0 * d) / (2.0 * v * v)


def count_moments(p: ChannelParams, w: float, t: float) -> tuple[float, float]:
    """Mean and variance of the received count for release fraction w at time t.

    With n = round(w * max_molecules) released, the count is
    Binomial(n, P(t)): mean n P, variance n P (1 - P).
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"release fraction {w} outside [0, 1]")
    n_released = round(w * p.max_molecules)
    if n_released == 0:
        return 0.0, 0.0
    prob = capture_probability(p, t)
    mean = n_released * prob
    return mean, mean * (1.0 - prob)


def sample_count(rng: np.random.Generator, p: ChannelParams, w: float, t: float) -> float:
    """Draw one received count for release fraction w observed at time t.

    Exact binomial below GAUSSIAN_COUNT_THRESHOLD expected molecules,
    Gaussian approximation (clamped at zero) above.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"release fraction {w} outside [0, 1]")
    n_released = round(w * p.max_molecules)
    if n_released == 0:
        return 0.0
    prob = capture_probability(p, t)
    mean = n_released * prob
    if mean < GAUSSIAN_COUNT_THRESHOLD:
        return float(rng.binomial(n_released, prob))
    std = math.sqrt(mean * (1.0 - prob))
    return max(0.0, mean + std * rng.standard_normal())


@dataclass(frozen=True)
class SlotObservation:
    """One receiver observation: raw count plus its expected decomposition."""

    count: float        # observed molecules, >= 0
    signal_mean: float  # expected current-slot contribution
    isi_mean: float     # expected residue of the prior slots
    w_rx: float         # count / (max_molecules * P(t)), the normalized symbol


def observe_slot(
    rng: np.random.Generator,
    p: ChannelParams,
    w_curr: float,
    w_prev_window,
    t: float | None = None,
) -> SlotObservation:
    """Observe one slot: current release + ISI from prior slots + noise.

    ``w_prev_window`` lists the release fractions of the preceding slots,
    most recent first; it may be shorter than the channel memory (frame
    start), in which case the missing entries are silent. ``t`` is the
    in-slot observation instant and defaults to the configured one.
    """
    if t is None:
        t = p.observation_time()
    if not 0 < t <= p.slot_s:
        raise ValueError(f"observation instant {t} outside (0, slot_s]")
    window = [float(v) for v in w_prev_window][: p.memory]
    count = sample_count(rng, p, w_curr, t)
    signal_mean, _ = count_moments(p, w_curr, t)
    isi_mean = 0.0
    for i, w_past in enumerate(window, start=1):
        count += sample_count(rng, p, w_past, t + i * p.slot_s)
        isi_mean += count_moments(p, w_past, t + i * p.slot_s)[0]
    if p.noise_std > 0:
        count += p.noise_std * rng.standard_normal()
    count = max(0.0, count)
    w_rx = count / (p.max_molecules * capture_probability(p, t))
    return SlotObservation(count=count, signal_mean=signal_mean, isi_mean=isi_mean, w_rx=w_rx)


def normalized_slot_moments(
    p: ChannelParams, w_curr: float, w_prev_window, t: float | None = None
) -> tuple[float, float]:
    """Closed-form mean and variance of the normalized received symbol w_rx.

    w_rx = count / (max_molecules * P(t)); the count is the sum of the
    current-slot binomial, the ISI binomials, and the additive noise.
    """
    if t is None:
        t = p.observation_time()
    mean, var = count_moments(p, w_curr, t)
    for i, w_past in enumerate([float(v) for v in w_prev_window][: p.memory], start=1):
        m_i, v_i = count_moments(p, w_past, t + i * p.slot_s)
        mean += m_i
        var += v_i
    var += p.noise_std ** 2
    scale = p.max_molecules * capture_probability(p, t)
    return mean / scale, var / (scale * scale)


def observe_frame(
    rng: np.random.Generator, p: ChannelParams, frame, t: float | None = None
) -> list[SlotObservation]:
    """Transmit a frame over consecutive slots; ISI couples adjacent symbols.

    The slots before the frame are silent, so the first symbol sees no ISI.
    """
    seq = _as_sequence(frame)
    out = []
    for j in range(len(seq)):
        window = [seq[j - i] for i in range(1, p.memory + 1) if j - i >= 0]
        out.append(observe_slot(rng, p, seq[j], window, t))
    return out


def observe_frames(
    rng: np.random.Generator, p: ChannelParams, frames: np.ndarray, t: float | None = None
) -> np.ndarray:
    """Vectorized ``observe_frame`` over a (B, k) array of release fractions.

    Returns the (B, k) array of normalized received symbols. Statistically
    identical to per-slot observation but draws in column-major order, so
    streams differ from the scalar path for the same generator.
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2:
        raise ValueError("frames must be a (batch, symbols) array")
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise ValueError("release fractions outside [0, 1]")
    if t is None:
        t = p.observation_time()
    if not 0 < t <= p.slot_s:
        raise ValueError(f"observation instant {t} outside (0, slot_s]")
    batch, k = frames.shape
    probs = [capture_probability(p, t + i * p.slot_s) for i in range(p.memory + 1)]
    counts = np.zeros((batch, k))
    for i, prob in enumerate(probs):
        # contribution of the slot released i slots before the observed one
        w = frames[:, : k - i] if i else frames
        n_released = np.round(w * p.max_molecules)
        mean = n_released * prob
        drawn = np.where(
            mean < GAUSSIAN_COUNT_THRESHOLD,
            rng.binomial(n_released.astype(np.int64), prob),
            np.maximum(mean + np.sqrt(mean * (1.0 - prob)) * rng.standard_normal(mean.shape), 0.0),
        )
        drawn = np.where(n_released == 0, 0.0, drawn)
        counts[:, i:] += drawn
    if p.noise_std > 0:
        counts += p.noise_std * rng.standard_normal(counts.shape)
    counts = np.maximum(counts, 0.0)
    return counts / (p.max_molecules * probs[0])


def sir_at(
    p: ChannelParams,
    w_seq,
    j: int,
    t: float,
    sampled: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Signal-to-interference ratio of slot j observed at in-slot time t.

    Deterministic by default: expected counts in numerator and ISI terms,
    with the noise magnitude ``noise_std`` added to the denominator. With
    ``sampled=True`` the counts are drawn instead (requires ``rng``).
    """
    seq = _as_sequence(w_seq)
    if not 0 <= j < len(seq):
        raise IndexError(f"slot index {j} outside [0, {len(seq)})")
    if seq[j] == 0.0:
        return 0.0

    def term(w: float, tau: float) -> float:
        if sampled:
            return sample_count(rng, p, w, tau)
        return count_moments(p, w, tau)[0]

    signal = term(seq[j], t)
    interference = 0.0
    for i in range(1, p.memory + 1):
        if j - i >= 0:
            interference += term(seq[j - i], t + i * p.slot_s)
    denom = interference + p.noise_std
    if denom == 0.0:
        return math.inf
    return signal / denom


def sir_trace(p: ChannelParams, w_seq, dt: float) -> np.ndarray:
    """Deterministic SIR time series over all slots of a frame.

    Returns an array of (t_global, sir) rows on a uniform grid with step dt,
    covering local times (0, slot_s] of every slot.
    """
    if not 0 < dt < p.slot_s:
        raise ValueError(f"dt must lie in (0, slot_s), got {dt}")
    seq = _as_sequence(w_seq)
    steps = int(round(p.slot_s / dt))
    rows = []
    for j in range(len(seq)):
        for n in range(1, steps + 1):
            t_local = n * dt
            rows.append((j * p.slot_s + t_local, sir_at(p, seq, j, t_local)))
    return np.array(rows)


def write_sir_csv(path, trace: np.ndarray) -> None:
    """Export a SIR trace as CSV with linear and dB columns."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_s,sir,sir_db\n")
        for t_global, sir in trace:
            if sir == 0.0:
                db = "-inf"
            elif math.isinf(sir):
                db = "inf"
            else:
                db = repr(10.0 * math.log10(sir))
            fh.write(f"{float(t_global)!r},{float(sir)!r},{db}\n")


def with_overrides(p: ChannelParams, **kwargs) -> ChannelParams:
    """Copy of the parameters with selected fields replaced."""
    return replace(p, **kwargs)
