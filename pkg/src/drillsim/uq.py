"""Maximum-entropy laws for the bit-rock parameters and Monte Carlo propagation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .params import BitRockParams, ParameterError

log = logging.getLogger(__name__)

MAX_GAMMA_DELTA = 1.0 / math.sqrt(2.0)


def _check_gamma(mean: float, delta: float) -> None:
    if not mean > 0:
        raise ParameterError(f"gamma law needs a positive mean, got {mean}")
    if not 0 < delta < MAX_GAMMA_DELTA:
        raise ParameterError(f"gamma dispersion must lie in (0, 1/sqrt(2)), got {delta}")


def gamma_shape_scale(mean: float, delta: float) -> tuple[float, float]:
    """Shape ``1/delta^2`` and scale ``delta^2 mean`` of the gamma law."""
    _check_gamma(mean, delta)
    return 1.0 / delta**2, delta**2 * mean


def gamma_pdf(x, mean: float, delta: float):
    """Gamma density with the given mean and coefficient of variation."""
    k, theta = gamma_shape_scale(mean, delta)
    x = np.asarray(x, dtype=float)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    logp = (k - 1.0) * np.log(xs / mean) - xs / theta + k * math.log(k) - special.gammaln(k) - math.log(mean)
    return np.where(pos, np.exp(logp), 0.0)


def gamma_cdf(x, mean: float, delta: float):
    k, theta = gamma_shape_scale(mean, delta)
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, special.gammainc(k, np.maximum(x, 0.0) / theta), 0.0)


def beta_shape_params(mean: float, delta: float) -> tuple[float, float]:
    """Shape pair (a, b) of the beta law with the given mean and dispersion."""
    if not 0 < mean < 1:
        raise ParameterError(f"beta law needs a mean in (0, 1), got {mean}")
    if not delta > 0:
        raise ParameterError(f"beta dispersion must be positive, got {delta}")
    a = (mean / delta**2) * (1.0 / mean - delta**2 - 1.0)
    b = a * (1.0 / mean - 1.0)
    if not (a > 0 and b > 0):
        raise ParameterError(f"dispersion {delta} too large for mean {mean}: a={a:.4g}, b={b:.4g}")
    return a, b


def beta_pdf(x, a: float, b: float):
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    xs = np.where(inside, x, 0.5)
    logp = (a - 1.0) * np.log(xs) + (b - 1.0) * np.log1p(-xs) - special.betaln(a, b)
    return np.where(inside, np.exp(logp), 0.0)


def beta_cdf(x, a: float, b: float):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return special.betainc(a, b, x)


@dataclass(frozen=True)
class StochasticBitRock:
    """Random (alpha_BR, Gamma_BR, mu_BR) with gamma, gamma and beta laws.

    A zero dispersion makes the matching parameter deterministic.
    """

    m_alpha: float = 400.0
    delta_alpha: float = 0.005
    m_Gamma: float = 30e3
    delta_Gamma: float = 0.01
    m_mu: float = 0.4
    delta_mu: float = 0.005
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "Gamma"):
            m, d = getattr(self, f"m_{name}"), getattr(self, f"delta_{name}")
            if not m > 0:
                raise ParameterError(f"m_{name} must be positive")
            if not 0 <= d < MAX_GAMMA_DELTA:
                raise ParameterError(f"delta_{name} must lie in [0, 1/sqrt(2)), got {d}")
        if not 0 < self.m_mu < 1:
            raise ParameterError("m_mu must lie in (0, 1)")
        if self.delta_mu < 0:
            raise ParameterError("delta_mu must be non-negative")
        if self.delta_mu > 0:
            beta_shape_params(self.m_mu, self.delta_mu)
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")

    @property
    def beta_shapes(self) -> tuple[float, float]:
        return beta_shape_params(self.m_mu, self.delta_mu)

    @property
    def mean_params(self) -> BitRockParams:
        return BitRockParams(Gamma_BR=self.m_Gamma, alpha_BR=self.m_alpha, mu_BR=self.m_mu)

    def rng(self, index: int) -> np.random.Generator:
        """Generator keyed on (seed, index), independent of evaluation order."""
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), int(index)]))

    def _draw(self, rng: np.random.Generator, size=None):
        def gamma(m, d):
            if d == 0:
                return np.full(size, m) if size is not None else m
            k, theta = gamma_shape_scale(m, d)
            return rng.gamma(k, theta, size)

        alpha = gamma(self.m_alpha, self.delta_alpha)
        Gam = gamma(self.m_Gamma, self.delta_Gamma)
        if self.delta_mu == 0:
            mu = np.full(size, self.m_mu) if size is not None else self.m_mu
        else:
            a, b = self.beta_shapes
            mu = rng.beta(a, b, size)
        return alpha, Gam, mu

    def sample(self, n: int, stream: int = 0) -> np.ndarray:
        """``n`` draws as columns (alpha, Gamma, mu), for statistics checks."""
        alpha, Gam, mu = self._draw(self.rng(stream), size=n)
        return np.column_stack([alpha, Gam, mu])

    def draw(self, index: int) -> BitRockParams:
        alpha, Gam, mu = self._draw(self.rng(index))
        return BitRockParams(Gamma_BR=float(Gam), alpha_BR=float(alpha), mu_BR=float(mu))


def draw_realization(model: StochasticBitRock, index: int) -> BitRockParams:
    return model.draw(index)


# --------------------------------------------------------------------- MC metrics
def conv_series(sq_norms) -> np.ndarray:
    """``conv(k) = sqrt(mean of the first k squared trajectory norms)``.

    ``sq_norms[n]`` is ``int ||q(t, theta_n)||^2 dt`` for realization ``n``.
    """
    sq = np.asarray(sq_norms, dtype=float)
    k = np.arange(1, sq.size + 1)
    return np.sqrt(np.cumsum(sq) / k)


def tail_relative_change(series, fraction: float = 0.25) -> float:
    """Spread of the last ``fraction`` of a series relative to its final value."""
    s = np.asarray(series, dtype=float)
    n = max(2, int(math.ceil(fraction * s.size)))
    tail = s[-n:]
    return float((tail.max() - tail.min()) / abs(s[-1]))


def envelope(samples, lower: float = 2.5, upper: float = 97.5):
    """Sample mean and percentile band over realizations (axis 0)."""
    x = np.asarray(samples, dtype=float)
    return x.mean(axis=0), np.percentile(x, lower, axis=0), np.percentile(x, upper, axis=0)


def normalized_pdf(samples):
    """Histogram density of the standardized samples (Freedman-Diaconis bins).

    Returns (bin_centres, density). A degenerate sample gives a single bin.
    """
    x = np.asarray(samples, dtype=float).ravel()
    sd = x.std()
    if sd == 0 or x.size < 2:
        return np.array([0.0]), np.array([np.inf])
    z = (x - x.mean()) / sd
    dens, edges = np.histogram(z, bins="fd", density=True)
    return 0.5 * (edges[1:] + edges[:-1]), dens


# ----------------------------------------------------------------- MC driver
@dataclass
class McRun:
    """Results of a Monte Carlo propagation, indexed by realization."""

    n_s: int
    draws: np.ndarray
    sq_norms: np.ndarray
    summaries: list
    failures: list = field(default_factory=list)
    t: np.ndarray | None = None
    series: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.sq_norms)

    @property
    def conv(self) -> np.ndarray:
        return conv_series(self.sq_norms[self.ok])

    def envelope(self, name: str, lower: float = 2.5, upper: float = 97.5):
        return envelope(self.series[name][self.ok], lower, upper)

    def summary_array(self, key: str) -> np.ndarray:
        return np.array([s[key] if s is not None else np.nan for s in self.summaries], dtype=float)


_WORKER: dict = {}


def _init_worker(ctx):
    _WORKER.clear()
    _WORKER.update(ctx)


def _realization(index: int):
    from .integrate import simulate  # deferred: keeps module import light

    ctx = _WORKER
    stoch: StochasticBitRock = ctx["stochastic"]
    dyn = ctx["dyn"]
    draw = stoch.draw(index)
    d = dyn.variant(dyn.model.with_bitrock(draw))
    try:
        tr = simulate(d, ctx["t_end"], q0=ctx["q0"], **ctx["sim_kwargs"])
    except Exception as exc:  # a failed realization is logged and excluded
        return index, draw, None, None, None, repr(exc), None
    obs = {name: fn(tr) for name, fn in ctx["observables"].items()}
    summary = ctx["summarize"](tr) if ctx["summarize"] is not None else {}
    return index, draw, tr.l2_norm() ** 2, obs, summary, None, tr.t


def run_monte_carlo(dyn, stochastic: StochasticBitRock, n_s: int, t_end: float, q0=None,
                    observables: dict | None = None, summarize=None, jobs: int = 1,
                    first_index: int = 0, sim_kwargs: dict | None = None) -> McRun:
    """Propagate the bit-rock uncertainty through ``n_s`` independent runs.

    ``observables`` maps names to ``f(trajectory) -> time series`` for the
    envelope bands, ``summarize(trajectory) -> dict`` collects per-run scalars.
    Realization ``i`` always uses the draw keyed on ``(seed, first_index + i)``
    regardless of ``jobs``. Callables must be picklable when ``jobs > 1``.
    """
    if n_s < 1:
        raise ParameterError("n_s must be at least 1")
    ctx = dict(stochastic=stochastic, dyn=dyn, t_end=t_end, q0=q0,
               observables=observables or {}, summarize=summarize, sim_kwargs=sim_kwargs or {})
    indices = list(range(first_index, first_index + n_s))
    if jobs <= 1:
        _init_worker(ctx)
        results = [_realization(i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx,)) as ex:
            results = list(ex.map(_realization, indices))
    results.sort(key=lambda r: r[0])
    draws = np.array([[r[1].alpha_BR, r[1].Gamma_BR, r[1].mu_BR] for r in results])
    sq = np.array([np.nan if r[2] is None else r[2] for r in results])
    failures = [(r[0], r[5]) for r in results if r[5] is not None]
    if failures:
        log.warning("%d of %d realizations failed and were excluded", len(failures), n_s)
    series = {}
    for name in ctx["observables"]:
        rows = [r[3][name] for r in results if r[3] is not None]
        n_t = len(rows[0]) if rows else 0
        arr = np.full((n_s, n_t), np.nan)
        for k, r in enumerate(results):
            if r[3] is not None:
                arr[k] = r[3][name]
        series[name] = arr
    t = next((r[6] for r in results if r[6] is not None), None)
    return McRun(n_s=n_s, draws=draws, sq_norms=sq, summaries=[r[4] for r in results],
                 failures=failures, t=t, series=series)
