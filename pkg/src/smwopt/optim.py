"""Training loops: curvature-preconditioned steps, SGD and CG baselines.

One iteration of the second-order methods draws a gradient batch S1 and a
curvature sub-batch S2 from S1, computes the damped direction p on S2,
measures the reduction ratio rho with S1 estimates of the objective at
the unscaled trial point theta + p, updates the damping state, and
applies theta + alpha * p. In semi-stochastic mode the gradient and
objective use the full data set, alpha is 1, and the step is applied only
when rho clears the acceptance threshold eta (which makes the sequence of
objective values non-increasing).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import curvature, damping as damping_mod, diff, loss as loss_mod, solver
from .counters import OpCounters
from .exceptions import ConfigError
from .network import NetworkShape, forward, init_theta

SGD = "sgd"
HF = "hf"
SMW_GN = "smw-gn"
SMW_NG = "smw-ng"
METHODS = (SGD, HF, SMW_GN, SMW_NG)

EVAL_CHUNK = 4096


class TrainingError(RuntimeError):
    """Numeric or factorization failure inside the training loop."""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {cause}")


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = SMW_GN
    n1: int = 60
    n2: int = 30
    alpha: float = 0.1
    lambda_lm: float = 1.0
    tau: float = 0.001
    boost: float = 1.01
    drop: float = 0.99
    epsilon: float = 0.25
    semi_stochastic: bool = False
    eta: float = 0.1
    cg: solver.CgConfig = field(default_factory=solver.CgConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method: {self.method!r}")
        if not 1 <= self.n2 <= self.n1:
            raise ConfigError(f"need 1 <= n2 <= n1, got n2={self.n2}, n1={self.n1}")
        if not self.alpha > 0.0:
            raise ConfigError("alpha must be positive")
        if self.semi_stochastic:
            if self.method == SGD:
                raise ConfigError("semi-stochastic mode needs a curvature method")
            if self.alpha != 1.0:
                raise ConfigError("semi-stochastic mode requires alpha == 1")
            if not 0.0 < self.eta < self.epsilon:
                raise ConfigError("semi-stochastic mode requires 0 < eta < epsilon")

    def damping_state(self) -> damping_mod.DampingState:
        return damping_mod.DampingState(
            lambda_lm=self.lambda_lm,
            tau=self.tau,
            boost=self.boost,
            drop=self.drop,
            epsilon=self.epsilon,
        )


@dataclass
class IterationRecord:
    iteration: int
    epoch_frac: float
    batch_loss: float
    rho: float
    lam: float
    grad_norm: float
    step_norm: float
    accepted: bool
    wall_time: float
    counters: OpCounters
    full_loss: float | None = None
    test_error: float | None = None


class EpochSampler:
    """Shuffled-partition batch sampling.

    Each epoch is a fresh random permutation cut into batches of n1, so
    over one epoch with N divisible by n1 every index appears exactly
    once. The curvature sub-batch is the first n2 indices of the batch,
    which is itself a uniform subset because the batch is shuffled.
    """

    def __init__(self, rng: np.random.Generator, n: int, n1: int, n2: int):
        if not 1 <= n2 <= n1 <= n:
            raise ConfigError(f"need 1 <= n2 <= n1 <= N, got {n2}, {n1}, {n}")
        self.rng = rng
        self.n = n
        self.n1 = n1
        self.n2 = n2
        self._perm: np.ndarray | None = None
        self._pos = 0

    def sample_batches(self) -> tuple[np.ndarray, np.ndarray]:
        if self._perm is None or self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        s1 = self._perm[self._pos : self._pos + self.n1]
        self._pos += self.n1
        s2 = s1[: min(self.n2, s1.size)]
        return s1, s2


class Trainer:
    """Owns the parameter vector, damping state, counters, and batch stream.

    inputs is (N, m0) and targets (N, m_L) with samples as rows; they are
    stored transposed so batches slice out as column blocks.
    """

    def __init__(
        self,
        shape: NetworkShape,
        spec: loss_mod.LossSpec,
        inputs: np.ndarray,
        targets: np.ndarray,
        config: OptimizerConfig,
        theta0: np.ndarray | None = None,
        test_inputs: np.ndarray | None = None,
        test_targets: np.ndarray | None = None,
    ):
        spec.check_matches(shape)
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
            raise ConfigError(
                f"inputs {inputs.shape} / targets {targets.shape} must be "
                "2-d with matching row counts"
            )
        self.shape = shape
        self.spec = spec
        self.x = np.ascontiguousarray(inputs.T)
        self.y = np.ascontiguousarray(targets.T)
        self.n_samples = inputs.shape[0]
        n1 = config.n1
        if config.semi_stochastic and n1 != self.n_samples:
            raise ConfigError(
                f"semi-stochastic mode requires n1 == N ({self.n_samples}), "
                f"got {n1}"
            )
        if n1 > self.n_samples:
            raise ConfigError(f"n1={n1} exceeds data set size {self.n_samples}")
        self.config = config
        seed_init, seed_batch = np.random.SeedSequence(config.seed).spawn(2)
        self.theta = (
            init_theta(shape, np.random.default_rng(seed_init))
            if theta0 is None
            else np.array(theta0, dtype=np.float64, copy=True)
        )
        self.sampler = EpochSampler(
            np.random.default_rng(seed_batch), self.n_samples, n1, config.n2
        )
        self.damping = config.damping_state()
        self.counters = OpCounters()
        self.t = 0
        self.samples_seen = 0
        self.test_x = None if test_inputs is None else np.ascontiguousarray(
            np.asarray(test_inputs, dtype=np.float64).T
        )
        self.test_y = None if test_targets is None else np.ascontiguousarray(
            np.asarray(test_targets, dtype=np.float64).T
        )
        self._clock_start = time.perf_counter()

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(self.n_samples / self.config.n1)

    def _positions_in(self, s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
        where = {int(idx): pos for pos, idx in enumerate(s1)}
        try:
            return np.array([where[int(idx)] for idx in s2])
        except KeyError:
            raise ConfigError("curvature batch is not a subset of the gradient batch")

    def _mean_loss(self, cache, targets) -> float:
        return float(np.mean(loss_mod.loss_value(self.spec, cache, targets)))

    def step(self) -> IterationRecord:
        """Sample batches and run one iteration of the configured method."""
        s1, s2 = self.sampler.sample_batches()
        if self.config.semi_stochastic:
            # Evaluate the full-set objective in fixed index order so
            # rejected steps reproduce f(theta) bit for bit; the curvature
            # sub-batch keeps the random draw.
            s1 = np.arange(self.n_samples)
        try:
            if self.config.method == SGD:
                return self.step_sgd(s1)
            if self.config.semi_stochastic:
                return self.step_semi_stochastic(s1, s2)
            if self.config.method == HF:
                return self.step_hf(s1, s2)
            return self.step_smw(s1, s2)
        except (ArithmeticError, FloatingPointError) as err:
            raise TrainingError(self.t, err) from err

    def step_sgd(self, s1: np.ndarray) -> IterationRecord:
        cache = forward(self.shape, self.theta, self.x[:, s1], self.counters)
        f_before = self._mean_loss(cache, self.y[:, s1])
        g, _ = diff.gradient(
            self.shape, self.theta, cache, self.y[:, s1], self.spec, self.counters
        )
        self.theta = self.theta - self.config.alpha * g
        return self._record(
            batch_loss=f_before,
            rho=math.nan,
            lam=math.nan,
            grad_norm=float(np.linalg.norm(g)),
            step_norm=float(np.linalg.norm(g)),
            accepted=True,
            batch_size=s1.size,
        )

    def step_smw(self, s1: np.ndarray, s2: np.ndarray) -> IterationRecord:
        return self._second_order_step(s1, s2, accept_threshold=None)

    def step_hf(self, s1: np.ndarray, s2: np.ndarray) -> IterationRecord:
        return self._second_order_step(s1, s2, accept_threshold=None)

    def step_semi_stochastic(self, s1: np.ndarray, s2: np.ndarray) -> IterationRecord:
        """Full-gradient iteration: apply the step only when rho >= eta."""
        if s1.size != self.n_samples:
            raise ConfigError("semi-stochastic step needs the full index set")
        return self._second_order_step(s1, s2, accept_threshold=self.config.eta)

    def _direction(self, s1, s2, cache1, g, gfactors) -> solver.DirectionResult:
        positions = self._positions_in(s1, s2)
        cache2 = cache1.cols(positions)
        lam = self.damping.lam
        if self.config.method == SMW_NG:
            system = curvature.build_ng_system(gfactors.cols(positions), lam)
            return solver.smw_direction(
                self.shape, self.theta, system, g, self.counters
            )
        if self.config.method == HF:
            return solver.hf_cg_direction(
                self.shape,
                self.theta,
                cache2,
                self.y[:, s2],
                self.spec,
                lam,
                self.config.cg,
                g,
                self.counters,
            )
        system = curvature.build_gn_system(
            self.shape, self.theta, cache2, self.y[:, s2], self.spec, lam,
            self.counters,
        )
        return solver.smw_direction(self.shape, self.theta, system, g, self.counters)

    def _second_order_step(
        self, s1, s2, accept_threshold: float | None
    ) -> IterationRecord:
        x1, y1 = self.x[:, s1], self.y[:, s1]
        cache1 = forward(self.shape, self.theta, x1, self.counters)
        f_before = self._mean_loss(cache1, y1)
        g, gfactors = diff.gradient(
            self.shape, self.theta, cache1, y1, self.spec, self.counters
        )
        lam_used = self.damping.lam
        result = self._direction(s1, s2, cache1, g, gfactors)
        trial_cache = forward(
            self.shape, self.theta + result.p, x1, self.counters
        )
        f_after = self._mean_loss(trial_cache, y1)
        report = damping_mod.compute_rho(
            f_before, f_after, result.grad_dot, result.quad_term
        )
        self.damping = damping_mod.update_lambda(self.damping, report.rho)
        accepted = accept_threshold is None or report.rho >= accept_threshold
        if accepted:
            self.theta = self.theta + self.config.alpha * result.p
        return self._record(
            batch_loss=f_before,
            rho=report.rho,
            lam=lam_used,
            grad_norm=float(np.linalg.norm(g)),
            step_norm=result.step_norm,
            accepted=accepted,
            batch_size=s1.size,
        )

    def _record(
        self, batch_loss, rho, lam, grad_norm, step_norm, accepted, batch_size
    ) -> IterationRecord:
        self.samples_seen += int(batch_size)
        rec = IterationRecord(
            iteration=self.t,
            epoch_frac=self.samples_seen / self.n_samples,
            batch_loss=batch_loss,
            rho=rho,
            lam=lam,
            grad_norm=grad_norm,
            step_norm=step_norm,
            accepted=accepted,
            wall_time=time.perf_counter() - self._clock_start,
            counters=self.counters.snapshot(),
        )
        self.t += 1
        return rec

    def _dataset_loss(self, x: np.ndarray, y: np.ndarray) -> float:
        total = 0.0
        for start in range(0, x.shape[1], EVAL_CHUNK):
            sl = slice(start, min(start + EVAL_CHUNK, x.shape[1]))
            cache = forward(self.shape, self.theta, x[:, sl], self.counters)
            total += float(np.sum(loss_mod.loss_value(self.spec, cache, y[:, sl])))
        return total / x.shape[1]

    def full_loss(self) -> float:
        """Mean loss over the whole training set at the current theta."""
        return self._dataset_loss(self.x, self.y)

    def full_gradient(self) -> np.ndarray:
        cache = forward(self.shape, self.theta, self.x, self.counters)
        g, _ = diff.gradient(
            self.shape, self.theta, cache, self.y, self.spec, self.counters
        )
        return g

    def test_error(self) -> float:
        if self.test_x is None:
            return math.nan
        errors = 0.0
        for start in range(0, self.test_x.shape[1], EVAL_CHUNK):
            sl = slice(start, min(start + EVAL_CHUNK, self.test_x.shape[1]))
            cache = forward(self.shape, self.theta, self.test_x[:, sl], self.counters)
            errors += loss_mod.error_rate(
                cache.output, self.test_y[:, sl]
            ) * (sl.stop - sl.start)
        return errors / self.test_x.shape[1]

    def run(
        self,
        num_iters: int,
        eval_interval: int | None = None,
        record_hook=None,
    ) -> list[IterationRecord]:
        """Run num_iters iterations, attaching full evaluations periodically.

        eval_interval defaults to once per epoch; pass 0 to disable the
        full-data evaluations entirely.
        """
        if eval_interval is None:
            eval_interval = self.iters_per_epoch
        records = []
        for _ in range(num_iters):
            rec = self.step()
            if eval_interval and rec.iteration % eval_interval == eval_interval - 1:
                rec.full_loss = self.full_loss()
                rec.test_error = self.test_error()
            if record_hook is not None:
                record_hook(rec)
            records.append(rec)
        return records
