"""
Game Option Service Module

American game options: the holder may exercise for L, the issuer may cancel
for U (intrinsic value plus a cancellation premium), and at maturity the
payoff is xi. The fair price is the value of the Dynkin game and equals Y_0
of the doubly reflected equation with generator f = -r y.

The tree oracle here is a direct backward induction on the lattice and does
not use the solver module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from drbsde.config import Config
from drbsde.errors import InconsistentBarriersError, InvalidArgumentError
from drbsde.models import MarketSpec, ProblemData, SolutionBundle, StateLayout, TimeGrid, WeightProfile
from drbsde.services.core_service import weights_for_problem
from drbsde.services.expectation_service import ExpectationBackend, Lattice, LatticeBackend, build_lattice
from drbsde.services.solver_service import PicardConfig, picard_solve, solve_clamped, solve_penalized
from drbsde.utils.generators import discounting, physical_discounting, zero
from drbsde.utils.payoffs import Payoff

logger = logging.getLogger(__name__)

ENGINES = ('clamped', 'penalized', 'picard')


# =============================================================================
# DATA CLASSES
# =============================================================================

@dataclass(frozen=True)
class GameSpec:
    """
    market:    Black-Scholes coefficients and S0
    lower:     holder's exercise payoff L(t, S); None stands for -inf
    upper:     issuer's cancellation payoff U(t, S); None stands for +inf
    terminal:  payoff xi(S_T) at maturity
    """
    market: MarketSpec
    terminal: Payoff
    lower: Optional[Payoff] = None
    upper: Optional[Payoff] = None
    name: str = "game_option"

    @classmethod
    def cancellable_put(cls, s0: float, strike: float, premium: float, r: float = 0.05,
                        sigma: float = 0.2, theta: float = 0.0) -> GameSpec:
        """Put the issuer may cancel by paying intrinsic value plus ``premium``."""
        if premium < 0:
            raise InvalidArgumentError("cancellation premium must be nonnegative")
        payoff = Payoff(kind="put", strike=strike)
        return cls(MarketSpec(s0=s0, r=r, theta=theta, sigma=sigma), terminal=payoff,
                   lower=payoff, upper=payoff.with_premium(premium), name="cancellable_put")

    @classmethod
    def cancellable_call(cls, s0: float, strike: float, premium: float, r: float = 0.05,
                         sigma: float = 0.2, theta: float = 0.0) -> GameSpec:
        if premium < 0:
            raise InvalidArgumentError("cancellation premium must be nonnegative")
        payoff = Payoff(kind="call", strike=strike)
        return cls(MarketSpec(s0=s0, r=r, theta=theta, sigma=sigma), terminal=payoff,
                   lower=payoff, upper=payoff.with_premium(premium), name="cancellable_call")

    def to_problem(self, grid: TimeGrid, measure: str = 'risk_neutral') -> ProblemData:
        """Problem data with the discounting generator of the chosen measure."""
        if measure == 'risk_neutral':
            generator = discounting(self.market.r, grid.nodes)
        elif measure == 'physical':
            generator = physical_discounting(self.market.r, self.market.theta, grid.nodes)
        else:
            raise InvalidArgumentError(f"unknown measure '{measure}'")
        return ProblemData(terminal=self.terminal.terminal, generator=generator,
                           lower=self.lower, upper=self.upper, name=self.name)

    def validate(self, layout: StateLayout) -> None:
        """L <= U at every node of the layout and L_T <= xi <= U_T."""
        ProblemData(terminal=self.terminal.terminal, generator=zero(),
                    lower=self.lower, upper=self.upper).check_barriers(layout)


@dataclass
class ExerciseRegions:
    """Per node: holder exercises (Y = L), issuer cancels (Y = U), else continue."""
    holder: np.ndarray
    issuer: np.ndarray
    mask: np.ndarray

    @property
    def continuation(self) -> np.ndarray:
        return self.mask & ~self.holder & ~self.issuer

    def fractions(self) -> Dict[str, list]:
        """Share of valid nodes in each region, per level."""
        valid = self.mask.sum(axis=1)
        return {
            'holder': (self.holder.sum(axis=1) / valid).tolist(),
            'issuer': (self.issuer.sum(axis=1) / valid).tolist(),
            'continuation': (self.continuation.sum(axis=1) / valid).tolist(),
        }

    def to_dict(self, with_masks: bool = True) -> Dict[str, Any]:
        out: Dict[str, Any] = {'fractions': self.fractions()}
        if with_masks:
            out['holder'] = [row[m].astype(int).tolist() for row, m in zip(self.holder, self.mask)]
            out['issuer'] = [row[m].astype(int).tolist() for row, m in zip(self.issuer, self.mask)]
        return out


@dataclass
class OracleResult:
    """
    value:         root value V_0
    values:        V_{i,j} on the lattice (invalid entries are 0)
    holder_stop:   nodes where V = L (the holder's first-touch policy stops)
    issuer_stop:   nodes where V = U (the issuer's first-touch policy cancels)
    """
    value: float
    values: np.ndarray
    holder_stop: np.ndarray
    issuer_stop: np.ndarray


@dataclass
class GamePrice:
    engine: str
    value: float
    regions: ExerciseRegions
    solution: SolutionBundle
    oracle_value: Optional[float] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def relative_gap(self) -> Optional[float]:
        if self.oracle_value is None:
            return None
        scale = abs(self.oracle_value)
        gap = abs(self.value - self.oracle_value)
        return gap / scale if scale > 0 else gap

    def to_dict(self) -> Dict[str, Any]:
        return {
            'engine': self.engine,
            'value': self.value,
            'oracle_value': self.oracle_value,
            'relative_gap': self.relative_gap,
            'regions': self.regions.to_dict(with_masks=self.solution.layout.kind == 'lattice'),
            'meta': self.meta,
        }


# =============================================================================
# PAYOFF & ORACLE
# =============================================================================

def evaluate_payoff(spec: GameSpec, tau: int, nu: int, trajectory: np.ndarray,
                    grid: Optional[TimeGrid] = None) -> float:
    """
    J(tau, nu) along one trajectory of states S_0..S_N.

    Stopping at node N pays xi; otherwise U_nu if the issuer cancels first
    (nu < tau) and L_tau if the holder stops first or together with the issuer.
    """
    trajectory = np.asarray(trajectory, dtype=float)
    n = trajectory.shape[0] - 1
    if n < 1:
        raise InvalidArgumentError("trajectory needs at least two nodes")
    if not (0 <= tau <= n and 0 <= nu <= n):
        raise InvalidArgumentError(f"stopping indices must lie in 0..{n}, got tau={tau}, nu={nu}")
    times = grid.nodes if grid is not None else np.arange(n + 1, dtype=float)
    if min(tau, nu) == n:
        return float(spec.terminal.terminal(trajectory[n:n + 1])[0])
    if nu < tau:
        return _payoff_at(spec.upper, times[nu], trajectory[nu], np.inf)
    return _payoff_at(spec.lower, times[tau], trajectory[tau], -np.inf)


def dynkin_tree_oracle(spec: GameSpec, lattice: Lattice) -> OracleResult:
    """
    Backward induction V_N = xi, V_i = min(U_i, max(L_i, e^{-r_i dt} E_i[V_{i+1}])).

    Raises:
        InconsistentBarriersError: L > U at a node
    """
    if lattice.kind != "market":
        raise InvalidArgumentError("the oracle needs a market lattice")
    n = lattice.n_steps
    dt = lattice.grid.steps
    times = lattice.grid.nodes
    values = np.zeros((n + 1, n + 1))
    holder_stop = np.zeros((n + 1, n + 1), dtype=bool)
    issuer_stop = np.zeros((n + 1, n + 1), dtype=bool)

    values[n, :] = spec.terminal.terminal(lattice.level(n))
    holder_stop[n, :] = issuer_stop[n, :] = True
    for i in range(n - 1, -1, -1):
        s = lattice.level(i)
        lower = _level_payoff(spec.lower, times[i], s, -np.inf)
        upper = _level_payoff(spec.upper, times[i], s, np.inf)
        if np.any(lower > upper):
            j = int(np.flatnonzero(lower > upper)[0])
            raise InconsistentBarriersError(f"lower payoff above upper payoff at node ({i}, {j})")
        p = lattice.probs[i]
        nxt = values[i + 1, :i + 2]
        cont = np.exp(-lattice.rates[i] * dt[i]) * (p * nxt[1:] + (1.0 - p) * nxt[:-1])
        v = np.minimum(upper, np.maximum(lower, cont))
        values[i, :i + 1] = v
        holder_stop[i, :i + 1] = v == lower
        issuer_stop[i, :i + 1] = v == upper
    return OracleResult(value=float(values[0, 0]), values=values,
                        holder_stop=holder_stop, issuer_stop=issuer_stop)


def holder_policy_value(spec: GameSpec, lattice: Lattice, oracle: OracleResult, delay: int = 0) -> float:
    """Root value of the delayed holder policy, see holder_policy_values."""
    return float(holder_policy_values(spec, lattice, oracle, delay)[0, 0])


def holder_policy_values(spec: GameSpec, lattice: Lattice, oracle: OracleResult, delay: int = 0) -> np.ndarray:
    """
    Tree values of the holder stopping ``delay`` nodes after first entering the
    oracle's exercise region, against the issuer's first-touch cancellation.

    delay = 0 reproduces the oracle values; every delay is a stopping time and
    cannot pay the holder more than the game value at any node.

    Returns:
        (N+1, N+1) values for a holder who has not yet entered the region,
        zero outside the lattice mask
    """
    if delay < 0:
        raise InvalidArgumentError("delay must be nonnegative")
    n = lattice.n_steps
    dt = lattice.grid.steps
    times = lattice.grid.nodes
    idle = delay + 1
    # W[s, j]: value at level i with countdown state s (idle = not yet triggered)
    W = np.repeat(spec.terminal.terminal(lattice.level(n))[None, :], delay + 2, axis=0)
    values = np.zeros((n + 1, n + 1))
    values[n] = W[idle]
    for i in range(n - 1, -1, -1):
        s_level = lattice.level(i)
        lower = _level_payoff(spec.lower, times[i], s_level, -np.inf)
        upper = _level_payoff(spec.upper, times[i], s_level, np.inf)
        p = lattice.probs[i]
        disc = np.exp(-lattice.rates[i] * dt[i])
        cont = disc * (p * W[:, 1:i + 2] + (1.0 - p) * W[:, :i + 1])
        new = np.empty((delay + 2, i + 1))
        for state in range(delay + 2):
            remaining = np.full(i + 1, state)
            if state == idle:
                remaining = np.where(oracle.holder_stop[i, :i + 1], delay, idle)
            next_state = np.where(remaining == idle, idle, np.maximum(remaining - 1, 0))
            value = cont[next_state, np.arange(i + 1)]
            value = np.where(oracle.issuer_stop[i, :i + 1], upper, value)
            new[state] = np.where(remaining == 0, lower, value)
        W = new
        values[i, :i + 1] = W[idle]
    return values


def exercise_regions(sol: SolutionBundle, problem: ProblemData, tol: float = Config.TOUCH_TOL) -> ExerciseRegions:
    """Active-barrier sets of a solution."""
    layout = sol.layout
    mask = layout.mask
    lower = problem.lower_values(layout)
    upper = problem.upper_values(layout)
    holder = np.zeros_like(mask) if lower is None else mask & (sol.y <= lower + tol)
    issuer = np.zeros_like(mask) if upper is None else mask & (sol.y >= upper - tol)
    if lower is not None and upper is not None:
        issuer &= ~(holder & (upper > lower))
    return ExerciseRegions(holder=holder, issuer=issuer, mask=mask)


# =============================================================================
# PRICING
# =============================================================================

def price_game_option(spec: GameSpec, engine: str, grid: TimeGrid, backend: ExpectationBackend,
                      w: Optional[WeightProfile] = None, penalty: int = 256,
                      lower_mode: str = 'penalize', picard: Optional[PicardConfig] = None,
                      measure: str = 'risk_neutral') -> GamePrice:
    """
    Price a game option as Y_0 of the doubly reflected equation.

    Args:
        spec: Game option
        engine: 'clamped', 'penalized' or 'picard'
        grid: Time grid of the backend
        backend: Lattice or regression backend (physical measure needs
            regression paths simulated with the risk premium)
        w: Weight profile (defaults to the generator's envelope)
        penalty: Penalty level for the penalized engine

    Returns:
        GamePrice with the oracle value when a lattice can be built on the grid
    """
    if engine not in ENGINES:
        raise InvalidArgumentError(f"engine must be one of {list(ENGINES)}")
    if measure == 'physical' and isinstance(backend, LatticeBackend):
        raise InvalidArgumentError("physical-measure pricing needs the regression backend")
    if isinstance(backend, LatticeBackend) and backend.lattice.kind != "market":
        raise InvalidArgumentError("game options are priced on a market lattice")
    problem = spec.to_problem(grid, measure)
    spec.validate(backend.layout)
    weights = w if w is not None else weights_for_problem(problem, grid)
    meta: Dict[str, Any] = {'measure': measure}

    if engine == 'clamped':
        sol = solve_clamped(problem, backend, grid, weights)
    elif engine == 'penalized':
        sol = solve_penalized(problem, penalty, backend, grid, weights, lower_mode)
        meta['penalty'] = penalty
    else:
        sol, trace = picard_solve(problem, picard or PicardConfig(beta=weights.beta), backend, grid, weights)
        meta['picard'] = trace.to_dict()

    oracle_value = None
    lattice = backend.lattice if isinstance(backend, LatticeBackend) else None
    try:
        lattice = lattice if lattice is not None and lattice.kind == "market" else build_lattice(grid, spec.market)
        oracle_value = dynkin_tree_oracle(spec, lattice).value
    except InvalidArgumentError as exc:
        logger.info("No tree oracle for this grid: %s", exc)

    price = GamePrice(engine=engine, value=sol.y0, regions=exercise_regions(sol, problem),
                      solution=sol, oracle_value=oracle_value, meta=meta)
    logger.info("Priced %s with %s engine: %.10g (oracle %s)", spec.name, engine, price.value,
                "n/a" if oracle_value is None else f"{oracle_value:.10g}")
    return price


def _payoff_at(payoff: Optional[Payoff], t: float, state: float, absent: float) -> float:
    if payoff is None:
        return absent
    return float(payoff(t, np.array([state]))[0])


def _level_payoff(payoff: Optional[Payoff], t: float, states: np.ndarray, absent: float) -> np.ndarray:
    if payoff is None:
        return np.full(states.shape, absent)
    return payoff(t, states)
