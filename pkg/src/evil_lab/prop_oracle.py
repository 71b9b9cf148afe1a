"""Monte-Carlo check of the mask-selection proposition and its error bounds.

Setting: a linear predictor with unit-norm weights over ``M = M_inv + M_var``
binary features. Invariant features always agree with the label; variant
features agree with probability ``p``. Given ``Y = 1`` each feature is a sign
in {-1, +1}, so the sign of a masked sum decides the prediction.

Two one-shot mask processes are simulated from a random 0/1 initialization:

* common: a kept variant bit is dropped whenever its feature disagrees with
  the label; invariant bits are never touched.
* domain-regularized: an invariant bit is switched on whenever its feature
  disagrees with the domain label (probability ``1 - q``), and the parameter
  budget freed on the invariant block is spread uniformly at random over the
  variant block.

Trials run in fixed-size chunks, each with its own derived seed, so results do
not depend on how chunks are scheduled.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import _kernels
from .errors import AcceptanceError, ConfigError

STRATEGIES = ("common", "regularized")
DEFAULT_GRID = (0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
_STRATEGY_KEY = {"common": 0, "regularized": 1}
_RATE, _ERROR = 0, 1


@dataclass(frozen=True)
class PropositionConfig:
    m_inv: int = 10
    m_var: int = 90
    p_grid: tuple = DEFAULT_GRID
    q_e: float = 0.5
    trials: int = 100_000
    seed: int = 0
    chunk: int = 10_000

    def __post_init__(self):
        if self.m_inv < 1 or self.m_var < 1:
            raise ConfigError(f"m_inv and m_var must be >= 1, got {self.m_inv}, {self.m_var}")
        if self.trials < 1000:
            raise ConfigError(f"trials must be >= 1000, got {self.trials}")
        if self.chunk < 1:
            raise ConfigError(f"chunk must be >= 1, got {self.chunk}")
        if not 0.0 <= self.q_e <= 1.0:
            raise ConfigError(f"q_e must lie in [0, 1], got {self.q_e}")
        grid = tuple(float(p) for p in self.p_grid)
        if not grid:
            raise ConfigError("p_grid must be non-empty")
        for p in grid:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_grid entries must lie in [0, 1], got {p}")
        object.__setattr__(self, "p_grid", grid)

    @property
    def regularized_var_rate(self) -> float:
        """Budget-argument variant rate ``q M_inv / (2 M_var)`` before clamping."""
        return self.q_e * self.m_inv / (2.0 * self.m_var)


@dataclass
class BoundReport:
    strategy: str
    p_e: float
    m_inv: int
    m_var: int
    q_e: float
    trials: int
    error: float
    error_se: float
    bound: float
    inv_rate: float
    inv_rate_se: float
    var_rate: float
    var_rate_se: float
    inv_init_pvalue: float
    full_error: float
    full_error_se: float
    budget_clamped: bool = False

    @property
    def bound_active(self) -> bool:
        return self.bound < 1.0

    @property
    def bound_ok(self) -> bool:
        return (not self.bound_active) or self.error <= self.bound + 3.0 * self.error_se


def _se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _chunks(config: PropositionConfig):
    done = 0
    index = 0
    while done < config.trials:
        n = min(config.chunk, config.trials - done)
        yield index, n
        done += n
        index += 1


def _rng(config: PropositionConfig, strategy: str, p: float, phase: int, chunk: int):
    key = [config.seed, _STRATEGY_KEY[strategy], int(round(p * 1_000_000)), config.m_var, phase, chunk]
    return np.random.default_rng(np.random.SeedSequence(key))


def _signs(rng, n: int, m: int, p: float) -> np.ndarray:
    """+1 with probability ``p``, else -1."""
    return np.where(rng.random((n, m)) < p, 1, -1).astype(np.int8)


def analytic_bounds(config: PropositionConfig, strategy: str, p_e: float) -> float:
    """Closed-form error bound for one strategy at agreement rate ``p_e``."""
    if strategy == "common":
        gap = p_e * p_e - 1.0
    elif strategy == "regularized":
        gap = (config.q_e * config.m_inv / config.m_var) * p_e - 1.0
    else:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    return 2.0 * math.exp(-2.0 * gap * gap * config.m_var)


def _select(config: PropositionConfig, strategy: str, p: float):
    """Run the flip process; return kept-bit counts per block."""
    kept_inv = kept_var = 0
    for index, n in _chunks(config):
        rng = _rng(config, strategy, p, _RATE, index)
        inv = rng.integers(0, 2, (n, config.m_inv), dtype=np.uint8)
        var = rng.integers(0, 2, (n, config.m_var), dtype=np.uint8)
        if strategy == "common":
            agree = _signs(rng, n, config.m_var, p) > 0
            var = var & agree.astype(np.uint8)
        else:
            disagree_d = rng.random((n, config.m_inv)) >= config.q_e
            inv = inv | disagree_d.astype(np.uint8)
            budget = np.minimum(config.m_inv - inv.sum(axis=1, dtype=np.int64), config.m_var)
            var = _kernels.budget_fill(rng.random((n, config.m_var)), budget)
        kept_inv += int(inv.sum(dtype=np.int64))
        kept_var += int(var.sum(dtype=np.int64))
    return kept_inv, kept_var


def estimate_error(inv_rate: float, var_rate: float, config: PropositionConfig, p_e: float,
                   strategy: str = "common") -> tuple[float, float, float, float]:
    """Error of the masked predictor when mask bits are drawn at the given kept rates.

    Returns ``(err, se, full_err, full_se)``. ``err`` uses the variant block
    alone, counting a masked sum of exactly 0 (including an empty mask) as an
    error. ``full_err`` adds the invariant block, whose features are all +1.
    """
    if not (0.0 <= inv_rate <= 1.0 and 0.0 <= var_rate <= 1.0):
        raise ConfigError(f"kept rates must lie in [0, 1], got {inv_rate}, {var_rate}")
    errors = full = 0
    for index, n in _chunks(config):
        rng = _rng(config, strategy, p_e, _ERROR, index)
        var = (rng.random((n, config.m_var)) < var_rate).astype(np.uint8)
        z = _signs(rng, n, config.m_var, p_e)
        inv = (rng.random((n, config.m_inv)) < inv_rate).astype(np.uint8)
        errors += _kernels.count_nonpositive(var, z)
        both = np.concatenate([inv, var], axis=1)
        zz = np.concatenate([np.ones((n, config.m_inv), dtype=np.int8), z], axis=1)
        full += _kernels.count_nonpositive(both, zz)
    t = config.trials
    err, ferr = errors / t, full / t
    return err, _se(err, t), ferr, _se(ferr, t)


def _report(config: PropositionConfig, strategy: str, p: float) -> BoundReport:
    kept_inv, kept_var = _select(config, strategy, p)
    n_inv = config.trials * config.m_inv
    n_var = config.trials * config.m_var
    inv_rate, var_rate = kept_inv / n_inv, kept_var / n_var
    clamped = strategy == "regularized" and config.regularized_var_rate > 1.0
    err, se, ferr, fse = estimate_error(inv_rate, var_rate, config, p, strategy)
    return BoundReport(
        strategy=strategy, p_e=p, m_inv=config.m_inv, m_var=config.m_var, q_e=config.q_e,
        trials=config.trials, error=err, error_se=se, bound=analytic_bounds(config, strategy, p),
        inv_rate=inv_rate, inv_rate_se=_se(inv_rate, n_inv),
        var_rate=var_rate, var_rate_se=_se(var_rate, n_var),
        inv_init_pvalue=float(binomtest(kept_inv, n_inv, 0.5).pvalue),
        full_error=ferr, full_error_se=fse, budget_clamped=clamped,
    )


def simulate_common_strategy(config: PropositionConfig, p_e: float | None = None) -> BoundReport:
    return _report(config, "common", config.p_grid[0] if p_e is None else float(p_e))


def simulate_domain_regularized(config: PropositionConfig, p_e: float | None = None) -> BoundReport:
    return _report(config, "regularized", config.p_grid[0] if p_e is None else float(p_e))


@dataclass
class SweepTable:
    config: PropositionConfig
    rows: list = field(default_factory=list)

    def violations(self) -> list:
        return [r for r in self.rows if not r.bound_ok]

    def direction_failures(self, p_max: float = 0.7) -> list:
        """Grid points with ``p <= p_max`` where the regularized error exceeds the common one."""
        by_p = {}
        for r in self.rows:
            by_p.setdefault(r.p_e, {})[r.strategy] = r
        out = []
        for p, pair in sorted(by_p.items()):
            if p <= p_max + 1e-12 and pair["regularized"].error > pair["common"].error:
                out.append(p)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(asdict(self.rows[0]).keys()) + ["bound_active", "bound_ok"] if self.rows else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            d = asdict(r)
            d["bound_active"], d["bound_ok"] = r.bound_active, r.bound_ok
            w.writerow([_fmt(d[k]) for k in names])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def sweep_and_compare(config: PropositionConfig, check: bool = True) -> SweepTable:
    """Both strategies at every grid point.

    With ``check`` a non-vacuous bound exceeded by more than three standard
    errors raises :class:`AcceptanceError` naming the grid points.
    """
    table = SweepTable(config)
    for p in config.p_grid:
        for strategy in STRATEGIES:
            table.rows.append(_report(config, strategy, p))
    if check:
        bad = table.violations()
        if bad:
            where = ", ".join(f"{r.strategy}@p={r.p_e:g}: err={r.error:.4g} > bound={r.bound:.4g}" for r in bad)
            raise AcceptanceError(f"{len(bad)} bound violation(s) at M_var={config.m_var}: {where}")
    return table
