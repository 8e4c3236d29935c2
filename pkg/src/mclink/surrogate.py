"""Learned probabilistic stand-in for the molecular channel.

A small mixture-density network maps the transmit context of one slot --
the current release fraction and the previous one (the channel is Markov
of order 1 at memory 1) -- to the parameters of a two-component Gaussian
mixture over the normalized received symbol:

    p(w_rx | context) = sum_i pi_i N(w_rx; mu_i, sigma2_i).

It is fitted by negative log-likelihood on pairs drawn from the real slot
sampler, then frozen. Afterwards it serves as the differentiable channel
for end-to-end transceiver training: a reparameterized draw
mu_i + sqrt(sigma2_i) * eps carries gradients through mu and sigma2 while
the component choice is held constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .channel import ChannelParams, observe_slot
from .nn import DenseNet, Tensor

COMPONENTS = 2
HIDDEN_WIDTH = 64
MDN_LAYERS = 5
SIGMA2_MIN = 1e-6
SIGMA2_MAX = 1e2
DENSITY_FLOOR = 1e-30
SAMPLE_MODES = ("sample", "mean", "relaxed")

SURROGATE_ROLE = "channel_surrogate"


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the history seen so far."""

    def __init__(self, message: str, history: dict):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class MixtureParams:
    """Mixture weights/means/variances; rows are contexts for batched use."""

    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        if not pi.shape == mu.shape == sigma2.shape:
            raise ValueError("pi, mu, sigma2 must share a shape")
        sums = pi.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("mixture weights must sum to 1 within 1e-6")
        if pi.min() < 0:
            raise ValueError("mixture weights must be non-negative")
        if sigma2.min() < SIGMA2_MIN:
            raise ValueError(f"variances must be >= {SIGMA2_MIN}")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    def mean(self) -> np.ndarray | float:
        m = (self.pi * self.mu).sum(axis=-1)
        return float(m) if m.ndim == 0 else m

    def variance(self) -> np.ndarray | float:
        m = (self.pi * self.mu).sum(axis=-1, keepdims=True)
        v = (self.pi * (self.sigma2 + (self.mu - m) ** 2)).sum(axis=-1)
        return float(v) if v.ndim == 0 else v


def mixture_pdf(mp: MixtureParams, w_rx) -> float | np.ndarray:
    """Mixture density at w_rx; broadcasts over batched parameters."""
    w = np.asarray(w_rx, dtype=float)
    w_exp = w[..., None] if mp.pi.ndim > 1 or w.ndim > 0 else w
    kernel = np.exp(-((w_exp - mp.mu) ** 2) / (2.0 * mp.sigma2))
    dens = (mp.pi * kernel / np.sqrt(2.0 * math.pi * mp.sigma2)).sum(axis=-1)
    return float(dens) if dens.ndim == 0 else dens


@dataclass(frozen=True)
class ChannelPair:
    """One training example: transmit context and observed symbol."""

    w_curr: float
    w_prev: float
    w_rx: float

    def __post_init__(self):
        if not 0.0 <= self.w_curr <= 1.0 or not 0.0 <= self.w_prev <= 1.0:
            raise ValueError("context fractions must lie in [0, 1]")


def generate_pairs(rng: np.random.Generator, p: ChannelParams, n: int) -> list[ChannelPair]:
    """Uniformly random contexts pushed through the real slot sampler."""
    if n < 1:
        raise ValueError("need at least one pair")
    t_obs = p.observation_time()
    pairs = []
    for _ in range(n):
        w_curr = float(rng.uniform())
        w_prev = float(rng.uniform())
        obs = observe_slot(rng, p, w_curr, [w_prev], t_obs)
        pairs.append(ChannelPair(w_curr=w_curr, w_prev=w_prev, w_rx=obs.w_rx))
    return pairs


def pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    contexts = np.array([(q.w_curr, q.w_prev) for q in pairs], dtype=float)
    targets = np.array([q.w_rx for q in pairs], dtype=float)
    return contexts, targets


def write_pairs_csv(path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("w_curr,w_prev,w_rx\n")
        for q in pairs:
            fh.write(f"{q.w_curr!r},{q.w_prev!r},{q.w_rx!r}\n")


def build_mdn_net(rng: np.random.Generator, hidden: int = HIDDEN_WIDTH,
                  h: int = COMPONENTS) -> DenseNet:
    """Five dense layers from (w_curr, w_prev) to the 3h mixture outputs."""
    dims = [2] + [hidden] * (MDN_LAYERS - 1) + [3 * h]
    activations = ["leaky_relu"] * (MDN_LAYERS - 1) + ["identity"]
    return DenseNet(dims, activations, rng=rng)


def mdn_head_tensors(raw: Tensor, h: int = COMPONENTS) -> tuple[Tensor, Tensor, Tensor]:
    """Split raw net outputs into (pi, mu, sigma2) graph tensors.

    pi through a softmax, mu as-is, sigma2 as exp of the log-variance
    clamped to [SIGMA2_MIN, SIGMA2_MAX].
    """
    pi = nn.softmax(raw[:, 0:h], axis=-1)
    mu = raw[:, h:2 * h]
    logvar = nn.clip(raw[:, 2 * h:3 * h], math.log(SIGMA2_MIN), math.log(SIGMA2_MAX))
    return pi, mu, nn.exp(logvar)


def mdn_forward(net: DenseNet, context) -> MixtureParams:
    """Numeric mixture parameters for one context (w_curr, w_prev) or a batch."""
    ctx = np.atleast_2d(np.asarray(context, dtype=float))
    raw = net.forward(Tensor(ctx))
    h = raw.data.shape[1] // 3
    pi, mu, sigma2 = mdn_head_tensors(raw, h)
    single = np.asarray(context).ndim == 1
    take = (lambda t: t.data[0]) if single else (lambda t: t.data)
    return MixtureParams(pi=take(pi), mu=take(mu), sigma2=take(sigma2))


def mdn_nll(net: DenseNet, pairs) -> Tensor:
    """Mean negative log-likelihood of the pairs under the net's mixtures.

    ``pairs`` is a list of ChannelPair or a (contexts, targets) tuple.
    The density is floored at DENSITY_FLOOR before the log so the loss
    stays finite on outliers.
    """
    if isinstance(pairs, tuple):
        contexts, targets = pairs
    else:
        contexts, targets = pairs_to_arrays(pairs)
    if len(np.atleast_1d(targets)) == 0:
        raise ValueError("empty batch")
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    raw = net.forward(Tensor(contexts))
    h = raw.data.shape[1] // 3
    pi, mu, sigma2 = mdn_head_tensors(raw, h)
    diff = mu - Tensor(targets.reshape(-1, 1))
    quad = (diff * diff) / (sigma2 * 2.0)
    norm = nn.power(sigma2 * (2.0 * math.pi), -0.5)
    dens = nn.tsum(pi * norm * nn.exp(-quad), axis=-1)
    return -nn.tmean(nn.log(nn.maximum_scalar(dens, DENSITY_FLOOR)))


def sample_surrogate(
    rng: np.random.Generator | None,
    mp,
    frozen_noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Reparameterized draw from a mixture, one sample per row.

    ``mp`` is either a numeric MixtureParams or a (pi, mu, sigma2) tuple of
    graph tensors. The component index is drawn from pi and treated as a
    constant; gradients flow through the selected mean and variance only.
    ``frozen_noise`` = (component index, standard-normal eps) replays fixed
    draws, e.g. for finite-difference checks.
    """
    if isinstance(mp, MixtureParams):
        pi_t = Tensor(np.atleast_2d(mp.pi))
        mu_t = Tensor(np.atleast_2d(mp.mu))
        s2_t = Tensor(np.atleast_2d(mp.sigma2))
    else:
        pi_t, mu_t, s2_t = mp
    n = pi_t.data.shape[0]
    if frozen_noise is None:
        if rng is None:
            raise ValueError("need an rng when no frozen noise is supplied")
        u = rng.random(n)
        idx = (u[:, None] > np.cumsum(pi_t.data, axis=1)).sum(axis=1)
        idx = np.minimum(idx, pi_t.data.shape[1] - 1)
        eps = rng.standard_normal(n)
    else:
        idx, eps = frozen_noise
        idx = np.asarray(idx, dtype=np.intp)
        eps = np.asarray(eps, dtype=float)
    mu_sel = nn.take_rows(mu_t, idx)
    s2_sel = nn.take_rows(s2_t, idx)
    return mu_sel + nn.sqrt(s2_sel) * Tensor(eps)


@dataclass
class ChannelSurrogate:
    """Trained mixture-density channel plus its sampling configuration."""

    net: DenseNet
    h: int = COMPONENTS
    sample_mode: str = "sample"       # sample | mean | relaxed
    temperature: float = 0.5          # for the relaxed (Gumbel-softmax) mode
    frozen: bool = False
    channel: dict = field(default_factory=dict)   # provenance echo

    def __post_init__(self):
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")

    def freeze(self) -> "ChannelSurrogate":
        self.net.set_requires_grad(False)
        self.frozen = True
        return self

    def mixture_tensors(self, ctx: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return mdn_head_tensors(self.net.forward(ctx), self.h)

    def mixture_at(self, w_curr: float, w_prev: float) -> MixtureParams:
        return mdn_forward(self.net, np.array([w_curr, w_prev]))

    def sample_tensor(
        self,
        ctx: Tensor,
        rng: np.random.Generator | None,
        frozen_noise=None,
    ) -> Tensor:
        """Per-row received-symbol draw with a gradient path into ``ctx``."""
        pi_t, mu_t, s2_t = self.mixture_tensors(ctx)
        if self.sample_mode == "mean":
            return nn.tsum(pi_t * mu_t, axis=-1)
        if self.sample_mode == "sample":
            return sample_surrogate(rng, (pi_t, mu_t, s2_t), frozen_noise=frozen_noise)
        # relaxed: Gumbel-softmax weights over components at fixed temperature
        n, h = pi_t.data.shape
        if frozen_noise is None:
            if rng is None:
                raise ValueError("need an rng when no frozen noise is supplied")
            gumbel = -np.log(-np.log(rng.random((n, h))))
            eps = rng.standard_normal((n, h))
        else:
            gumbel, eps = frozen_noise
        logits = (nn.log(nn.maximum_scalar(pi_t, 1e-12)) + Tensor(gumbel)) * (1.0 / self.temperature)
        weights = nn.softmax(logits, axis=-1)
        return nn.tsum(weights * (mu_t + nn.sqrt(s2_t) * Tensor(eps)), axis=-1)

    def sample_numeric(self, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = self.sample_tensor(Tensor(np.atleast_2d(contexts)), rng)
        return out.data

    def state_arrays(self) -> list[np.ndarray]:
        return self.net.state_arrays()

    def save(self, path) -> None:
        meta = {
            "h": self.h,
            "sample_mode": self.sample_mode,
            "temperature": self.temperature,
            "channel": self.channel,
        }
        nn.save_checkpoint(path, SURROGATE_ROLE, {"mdn": self.net}, meta)

    @classmethod
    def load(cls, path) -> "ChannelSurrogate":
        _, nets, meta = nn.load_checkpoint(path, expect_role=SURROGATE_ROLE)
        surr = cls(
            net=nets["mdn"],
            h=int(meta["h"]),
            sample_mode=meta["sample_mode"],
            temperature=float(meta["temperature"]),
            channel=meta.get("channel", {}),
        )
        return surr.freeze()


@dataclass(frozen=True)
class FitConfig:
    """Channel-network training settings."""

    n_pairs: int = 50_000
    max_epochs: int = 150
    batch_size: int = 256
    lr: float = 5e-3
    momentum: float = 0.9
    val_fraction: float = 0.1
    plateau_window: int = 5      # epochs compared for the convergence test
    rel_tolerance: float = 1e-4
    decay_patience: int = 3      # epochs without a new best before lr halves
    min_lr: float = 1e-5
    clip_norm: float = 5.0       # global gradient-norm ceiling
    sample_mode: str = "sample"


def fit_channel(
    rng: np.random.Generator,
    p: ChannelParams,
    cfg: FitConfig = FitConfig(),
    pairs: list[ChannelPair] | None = None,
) -> tuple[ChannelSurrogate, dict]:
    """Generate pairs, fit the mixture net by NLL, and freeze it.

    The mixture loss gets stiffer as the variances shrink, so the learning
    rate halves whenever the validation NLL stalls and the best-validation
    parameters are what the surrogate keeps. Stops once the best NLL has
    improved by less than ``rel_tolerance`` (relative) over
    ``plateau_window`` epochs, or at ``max_epochs``. Returns the frozen
    surrogate and {'train_nll': [...], 'val_nll': [...]}.
    """
    if pairs is None:
        pairs = generate_pairs(rng, p, cfg.n_pairs)
    contexts, targets = pairs_to_arrays(pairs)
    n_val = max(1, int(len(pairs) * cfg.val_fraction))
    val_ctx, val_tgt = contexts[:n_val], targets[:n_val]
    tr_ctx, tr_tgt = contexts[n_val:], targets[n_val:]

    net = build_mdn_net(rng)
    opt = nn.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    history: dict = {"train_nll": [], "val_nll": []}
    n_train = len(tr_tgt)
    best_nll = math.inf
    best_state = net.state_arrays()
    best_history: list[float] = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss = mdn_nll(net, (tr_ctx[sel], tr_tgt[sel]))
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergedError(
                    f"channel-network NLL became non-finite at epoch {epoch}", history
                )
            loss.backward()
            nn.clip_gradients(net.parameters(), cfg.clip_norm)
            opt.step()
            epoch_loss += float(loss.data) * len(sel)
        history["train_nll"].append(epoch_loss / n_train)
        val_nll = float(mdn_nll(net, (val_ctx, val_tgt)).data)
        if not math.isfinite(val_nll):
            raise TrainingDivergedError(
                f"validation NLL became non-finite at epoch {epoch}", history
            )
        history["val_nll"].append(val_nll)
        if val_nll < best_nll:
            best_nll = val_nll
            best_state = net.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.decay_patience and opt.lr > cfg.min_lr:
                opt.lr = max(opt.lr * 0.5, cfg.min_lr)
                stale = 0
        best_history.append(best_nll)
        if len(best_history) > cfg.plateau_window:
            anchor = best_history[-(cfg.plateau_window + 1)]
            if (anchor - best_nll) / max(1.0, abs(anchor)) < cfg.rel_tolerance:
                break
    net.load_state_arrays(best_state)
    surrogate = ChannelSurrogate(
        net=net, h=COMPONENTS, sample_mode=cfg.sample_mode,
        channel={"params": asdict(p)},
    )
    return surrogate.freeze(), history


def single_gaussian_nll(train_targets, heldout_targets) -> float:
    """Held-out NLL of the moment-matched unconditional Gaussian.

    Closed-form reference the trained mixture must beat: fit mean/variance
    to the training symbols, score the held-out ones.
    """
    train = np.asarray(train_targets, dtype=float)
    heldout = np.asarray(heldout_targets, dtype=float)
    mu = train.mean()
    var = max(train.var(), SIGMA2_MIN)
    nll = 0.5 * math.log(2.0 * math.pi * var) + ((heldout - mu) ** 2).mean() / (2.0 * var)
    return float(nll)
