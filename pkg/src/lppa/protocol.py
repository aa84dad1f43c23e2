"""Decentralized gradient-tracking rounds with optional initial noise.

Three aggregation rules share one round loop and differ only in how each
client's tracking variable is initialised:

* ``dsgt``: ``gamma_i = g_i``
* ``dp``:   ``gamma_i = g_i + zeta_i`` with ``zeta_i ~ Laplace(0, beta)^P``
* ``lppa``: ``gamma_i = g_i + (noise sent by i - noise received by i)``

A round performs, for every client with all reads taken from round ``t``::

    theta_i <- sum_j w_ij theta_j - lam * gamma_i
    g_new   <- grad(theta_i) on this round's batch
    gamma_i <- sum_j w_ij gamma_j + g_new - g_cached
    g_cached <- g_new

Subtracting the cached gradient, rather than re-evaluating the previous one
on a new batch, keeps ``sum(gamma) == sum(g_cached)`` exact for mini-batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as M
from .exceptions import InitError, ParameterError
from .numerics import LaplaceSpec, SeededRng, laplace_vector, stream_id
from .topology import Digraph, WeightMatrix

log = logging.getLogger(__name__)

RULES = ("dsgt", "dp", "lppa")


@dataclass(frozen=True)
class AggregationRule:
    kind: str = "dsgt"
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in RULES:
            raise ParameterError(f"unknown aggregation rule {self.kind!r}")
        if self.kind == "dsgt":
            object.__setattr__(self, "beta", None)
        elif self.beta is None or not np.all(np.asarray(self.beta, dtype=float) > 0):
            raise ParameterError(f"{self.kind} needs beta > 0, got {self.beta!r}")

    @classmethod
    def parse(cls, kind: str, beta=None) -> "AggregationRule":
        return cls(kind, None if kind == "dsgt" else beta)

    @property
    def label(self) -> str:
        return self.kind if self.beta is None else f"{self.kind}({self.beta})"


def _per_client(beta, n: int) -> np.ndarray:
    b = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,)).copy()
    if not np.all(b > 0):
        raise ParameterError("every beta entry must be positive")
    return b


@dataclass(frozen=True, eq=False)
class NoiseLedger:
    """Laplace vectors keyed by directed edge ``(receiver, sender)``."""

    graph: Digraph
    delta: dict

    @property
    def dim(self) -> int:
        return next(iter(self.delta.values())).shape[0] if self.delta else 0

    def sent(self, i: int) -> np.ndarray:
        out = np.zeros(self.dim)
        for l in self.graph.out_neighbors[i]:
            if l != i:
                out += self.delta[(l, i)]
        return out

    def received(self, i: int) -> np.ndarray:
        out = np.zeros(self.dim)
        for j in self.graph.in_neighbors[i]:
            if j != i:
                out += self.delta[(i, j)]
        return out

    def sent_matrix(self) -> np.ndarray:
        return np.stack([self.sent(i) for i in range(self.graph.n)])

    def received_matrix(self) -> np.ndarray:
        return np.stack([self.received(i) for i in range(self.graph.n)])


def exchange_noise(graph: Digraph, beta, dim: int, seed: int, round_: int = 0) -> NoiseLedger:
    """Draw one Laplace vector per non-self edge from that edge's own stream.

    ``beta`` may be a scalar or one scale per sending client.
    """
    scales = _per_client(beta, graph.n)
    delta = {}
    for sender, receiver in graph.edges():
        rng = SeededRng.for_purpose(seed, "edge_noise", sender, receiver, round_)
        delta[(receiver, sender)] = laplace_vector(rng, dim, LaplaceSpec(scales[sender]))
    return NoiseLedger(graph, delta)


def noise_difference(ledger: NoiseLedger, i: int) -> np.ndarray:
    """Total noise client ``i`` sent minus the total it received."""
    if ledger.dim == 0:
        return np.zeros(0)
    return ledger.sent(i) - ledger.received(i)


def noise_differences(ledger: NoiseLedger, dim: int | None = None) -> np.ndarray:
    n = ledger.graph.n
    if not ledger.delta:
        return np.zeros((n, dim or 0))
    return np.stack([noise_difference(ledger, i) for i in range(n)])


def dp_noise(n: int, beta, dim: int, seed: int, round_: int = 0) -> np.ndarray:
    scales = _per_client(beta, n)
    return np.stack([
        laplace_vector(SeededRng.for_purpose(seed, "dp_noise", i, round_), dim, LaplaceSpec(scales[i]))
        for i in range(n)
    ])


@dataclass(frozen=True, eq=False)
class ClientState:
    id: int
    theta: np.ndarray
    gamma: np.ndarray
    cached_grad: np.ndarray
    shard: object
    batch_indices: np.ndarray


@dataclass(frozen=True)
class SimulationConfig:
    rule: AggregationRule
    model: M.ModelSpec
    lam: float = 0.05
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 256
    seed: int = 0
    # fresh noise in every round instead of only at initialisation
    inject_each_round: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"step size must be positive, got {self.lam}")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ParameterError("rounds >= 0, local_epochs >= 1 and batch_size >= 1 required")


@dataclass(frozen=True, eq=False)
class SimulationState:
    t: int
    clients: tuple
    W: np.ndarray
    config: SimulationConfig
    ledger: NoiseLedger | None = None
    dp_noise: np.ndarray | None = None  # Z, one row per client
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def rule(self) -> AggregationRule:
        return self.config.rule

    @property
    def n(self) -> int:
        return len(self.clients)

    def thetas(self) -> np.ndarray:
        return np.stack([c.theta for c in self.clients])

    def gammas(self) -> np.ndarray:
        return np.stack([c.gamma for c in self.clients])

    def cached_grads(self) -> np.ndarray:
        return np.stack([c.cached_grad for c in self.clients])

    def consensus_theta(self) -> np.ndarray:
        return self.thetas().mean(axis=0)

    def perturbation(self) -> np.ndarray | None:
        """Initial protection term per client: ``Delta^S - Delta^R`` or ``Z``."""
        if self.rule.kind == "lppa":
            return noise_differences(self.ledger)
        if self.rule.kind == "dp":
            return self.dp_noise
        return None


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss: tuple
    accuracy: tuple
    consensus_accuracy: float
    consensus_distance: float
    tracking_residual: float
    noise_diff_sum_norm: float | None = None
    diverged: bool = False


def sample_batch(shard, batch_size: int, seed: int, client: int, round_: int) -> np.ndarray:
    """Sorted batch indices into ``shard``; the whole shard if it fits."""
    n = len(shard)
    if batch_size >= n:
        return np.arange(n)
    rng = SeededRng.for_purpose(seed, "batch", client, round_)
    return np.sort(rng.permutation(n)[:batch_size])


def _batch(shard, idx) -> M.Batch:
    return M.Batch(shard.features[idx], shard.labels[idx], idx)


def init_clients(
    config: SimulationConfig, shards: Sequence, weights: WeightMatrix | np.ndarray,
    graph: Digraph | None = None,
) -> SimulationState:
    w = np.asarray(weights, dtype=np.float64)
    graph = graph or getattr(weights, "graph", None)
    n = len(shards)
    if w.shape != (n, n):
        raise InitError(f"{n} shards but weight matrix is {w.shape}")
    if graph is not None and graph.n != n:
        raise InitError(f"graph has {graph.n} clients, got {n} shards")
    spec, seed = config.model, config.seed
    thetas, grads, batches = [], [], []
    for i, shard in enumerate(shards):
        if shard is None or len(shard) == 0:
            raise InitError(f"client {i} has an empty shard")
        theta = M.init_params(spec, seed, stream_id("init", i))
        idx = sample_batch(shard, config.batch_size, seed, i, 0)
        thetas.append(theta)
        batches.append(idx)
        grads.append(M.grad_weights(spec, theta, _batch(shard, idx)))
    grads = np.stack(grads)

    ledger, z, gammas = None, None, grads.copy()
    if config.rule.kind == "lppa":
        if graph is None:
            raise InitError("lppa needs the communication graph for the noise exchange")
        ledger = exchange_noise(graph, config.rule.beta, spec.n_params, seed)
        gammas = grads + noise_differences(ledger)
    elif config.rule.kind == "dp":
        z = dp_noise(n, config.rule.beta, spec.n_params, seed)
        gammas = grads + z

    clients = tuple(
        ClientState(i, thetas[i], gammas[i], grads[i], shards[i], batches[i]) for i in range(n)
    )
    w = w.copy()
    w.setflags(write=False)
    return SimulationState(0, clients, w, config, ledger=ledger, dp_noise=z)


def _with_arrays(state, thetas, gammas, grads, batches, **kw) -> SimulationState:
    clients = tuple(
        replace(c, theta=thetas[i], gamma=gammas[i], cached_grad=grads[i], batch_indices=batches[i])
        for i, c in enumerate(state.clients)
    )
    return replace(state, t=state.t + 1, clients=clients, **kw)


def _round_noise(state: SimulationState, round_: int) -> np.ndarray:
    cfg = state.config
    p = cfg.model.n_params
    if cfg.rule.kind == "lppa":
        graph = state.ledger.graph
        return noise_differences(exchange_noise(graph, cfg.rule.beta, p, cfg.seed, round_), p)
    if cfg.rule.kind == "dp":
        return dp_noise(state.n, cfg.rule.beta, p, cfg.seed, round_)
    return 0.0


def dsgt_round(state: SimulationState, lam: float | None = None, eval_data=None):
    """Advance one synchronous round; returns ``(new_state, metrics)``."""
    cfg = state.config
    lam = cfg.lam if lam is None else lam
    if state.diverged:
        new = replace(state, t=state.t + 1)
        return new, diverged_metrics(new)

    spec, t_next = cfg.model, state.t + 1
    with np.errstate(all="ignore"):
        theta_new = state.W @ state.thetas() - lam * state.gammas()
        grads, batches = [], []
        for i, c in enumerate(state.clients):
            idx = sample_batch(c.shard, cfg.batch_size, cfg.seed, i, t_next)
            b = _batch(c.shard, idx)
            for _ in range(cfg.local_epochs - 1):
                theta_new[i] = theta_new[i] - lam * M.grad_weights(spec, theta_new[i], b)
            grads.append(M.grad_weights(spec, theta_new[i], b))
            batches.append(idx)
        grads = np.stack(grads)
        gamma_new = state.W @ state.gammas() + grads - state.cached_grads()
        if cfg.inject_each_round:
            gamma_new = gamma_new + _round_noise(state, t_next)

    finite = np.all(np.isfinite(theta_new)) and np.all(np.isfinite(gamma_new))
    if not finite:
        log.warning("%s diverged at round %d", cfg.rule.label, t_next)
        new = _with_arrays(state, theta_new, gamma_new, grads, batches,
                           diverged=True, diverged_at=t_next)
        return new, diverged_metrics(new)
    new = _with_arrays(state, theta_new, gamma_new, grads, batches)
    return new, compute_metrics(new, eval_data)


def frozen_gradient_round(state: SimulationState, fixed_gradients, lam: float | None = None):
    """Same update algebra with every gradient replaced by a fixed vector."""
    lam = state.config.lam if lam is None else lam
    g = np.asarray(fixed_gradients, dtype=np.float64)
    if g.shape != (state.n, state.config.model.n_params):
        raise ParameterError(f"fixed gradients have shape {g.shape}")
    theta_new = state.W @ state.thetas() - lam * state.gammas()
    gamma_new = state.W @ state.gammas() + g - state.cached_grads()
    return _with_arrays(state, theta_new, gamma_new, g, [c.batch_indices for c in state.clients])


def consensus_distance(state: SimulationState) -> float:
    th = state.thetas()
    with np.errstate(over="ignore", invalid="ignore"):
        diff = th[:, None, :] - th[None, :, :]
        return float(np.sqrt((diff**2).sum(axis=2)).max())


def tracking_residual(state: SimulationState) -> float:
    return float(np.linalg.norm(state.gammas().sum(axis=0) - state.cached_grads().sum(axis=0)))


def compute_metrics(state: SimulationState, eval_data=None) -> RoundMetrics:
    spec = state.config.model
    losses, accs = [], []
    for c in state.clients:
        losses.append(M.forward_loss(spec, c.theta, c.shard))
        accs.append(M.accuracy(spec, c.theta, eval_data if eval_data is not None else c.shard))
    if eval_data is not None:
        cons_acc = M.accuracy(spec, state.consensus_theta(), eval_data)
    else:
        cons_acc = float(np.mean([
            M.accuracy(spec, state.consensus_theta(), c.shard) for c in state.clients
        ]))
    nd = None
    if state.ledger is not None:
        nd = float(np.abs(noise_differences(state.ledger).sum(axis=0)).max())
    return RoundMetrics(
        round=state.t,
        loss=tuple(losses),
        accuracy=tuple(accs),
        consensus_accuracy=cons_acc,
        consensus_distance=consensus_distance(state),
        tracking_residual=tracking_residual(state),
        noise_diff_sum_norm=nd,
    )


def diverged_metrics(state: SimulationState) -> RoundMetrics:
    nan = float("nan")
    return RoundMetrics(
        round=state.t,
        loss=(nan,) * state.n,
        accuracy=(nan,) * state.n,
        consensus_accuracy=nan,
        consensus_distance=nan,
        tracking_residual=nan,
        noise_diff_sum_norm=None,
        diverged=True,
    )


@dataclass
class SimulationResult:
    initial: SimulationState
    initial_metrics: RoundMetrics
    history: list = field(default_factory=list)
    state: SimulationState | None = None

    @property
    def diverged(self) -> bool:
        return self.state.diverged

    def consensus_theta(self) -> np.ndarray:
        return self.state.consensus_theta()


def run_simulation(
    config: SimulationConfig, shards: Sequence, weights: WeightMatrix, eval_data=None,
    graph: Digraph | None = None,
) -> SimulationResult:
    """Initialise and run ``config.rounds`` rounds.

    ``history`` holds the metrics after rounds ``1..T``; the metrics of the
    initial state are kept separately.  A diverged run still returns ``T``
    history entries, all flagged.
    """
    state = init_clients(config, shards, weights, graph)
    result = SimulationResult(state, compute_metrics(state, eval_data), [], state)
    for _ in range(config.rounds):
        state, metrics = dsgt_round(state, eval_data=eval_data)
        result.history.append(metrics)
    result.state = state
    return result
