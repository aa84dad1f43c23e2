"""Gradient-matching reconstruction of a victim's batch (DLG-style).

The adversary knows the model, the victim's current weights and the batch
shape, and sees the victim's transmitted tracking variable.  It fits dummy
features and soft-label logits so that their weight gradient matches what
it received.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .exceptions import ParameterError
from .numerics import SeededRng, finite_diff_gradient, stream_id


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 300
    step_size: float = 1.0
    restarts: int = 5
    target_round: int = 0
    init_seed: int = 0
    max_halvings: int = 40
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.iterations < 0 or not self.step_size > 0 or self.restarts < 1:
            raise ParameterError("need iterations >= 0, step_size > 0, restarts >= 1")
        if self.target_round < 0:
            raise ParameterError("target_round must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class ReconstructionResult:
    x_hat: np.ndarray
    y_hat: np.ndarray
    mse: float
    grad_match_residual: float
    iterations_used: int
    restart: int = 0
    aborted_restarts: int = 0
    objective_trace: list = field(default_factory=list, repr=False)


def mse(x_hat, x_true) -> float:
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def match_objective(spec, theta, x, label_logits, target) -> float:
    g, _ = M.soft_grads(spec, theta, x, M.softmax(label_logits))
    r = g - target
    return float(r @ r)


def _logreg_objective_grads(spec, theta, x, label_logits, target):
    """Closed-form gradients of the matching objective for logistic regression.

    With e_s = p_s - y_s, residuals R_W, R_b and v_s = R_W x_s + R_b:
    dJ/dx_s = 2/n (W^T J(p_s) v_s + R_W^T e_s),  dJ/dl_s = -2/n J(y_s) v_s,
    where J(q) = diag(q) - q q^T is the softmax Jacobian.
    """
    (w, b), = M.unpack(spec, theta)
    n = x.shape[0]
    p = M.softmax(x @ w.T + b)
    y = M.softmax(label_logits)
    e = p - y
    r = np.concatenate([(e.T @ x).ravel() / n, e.sum(axis=0) / n]) - target
    r_w = r[: w.size].reshape(w.shape)
    r_b = r[w.size :]
    v = x @ r_w.T + r_b
    jp_v = p * v - p * (p * v).sum(axis=1, keepdims=True)
    jy_v = y * v - y * (y * v).sum(axis=1, keepdims=True)
    gx = (2.0 / n) * (jp_v @ w + e @ r_w)
    gl = -(2.0 / n) * jy_v
    return float(r @ r), gx, gl


def objective_grads(spec, theta, x, label_logits, target, fd_step=1e-6):
    """``(J, dJ/dx, dJ/dlogits)``; analytic for logreg, central differences otherwise."""
    if spec.kind == "logreg":
        return _logreg_objective_grads(spec, theta, x, label_logits, target)
    nx = x.size

    def f(z):
        return match_objective(spec, theta, z[:nx].reshape(x.shape), z[nx:].reshape(label_logits.shape), target)

    z = np.concatenate([x.ravel(), label_logits.ravel()])
    g = finite_diff_gradient(f, z, fd_step)
    return f(z), g[:nx].reshape(x.shape), g[nx:].reshape(label_logits.shape)


def _descend(spec, theta, target, x, lg, cfg: AttackConfig):
    j, gx, gl = objective_grads(spec, theta, x, lg, target, cfg.fd_step)
    trace = [j]
    used = 0
    for _ in range(cfg.iterations):
        if not np.isfinite(j):
            break
        step = cfg.step_size
        accepted = False
        for _ in range(cfg.max_halvings):
            xt, lt = x - step * gx, lg - step * gl
            with np.errstate(all="ignore"):
                jt = match_objective(spec, theta, xt, lt, target)
            if np.isfinite(jt) and jt < j:
                accepted = True
                break
            step *= 0.5
        used += 1
        if not accepted:
            break
        x, lg = xt, lt
        j, gx, gl = objective_grads(spec, theta, x, lg, target, cfg.fd_step)
        trace.append(j)
    return x, lg, j, used, trace


def dlg_attack(
    spec: M.ModelSpec,
    victim_theta,
    received_gamma,
    batch_shape,
    true_batch=None,
    cfg: AttackConfig = AttackConfig(),
) -> ReconstructionResult:
    """Reconstruct a batch of shape ``batch_shape`` from ``received_gamma``.

    Each restart draws dummy features from U(0, 1) and label logits from
    N(0, 1), then takes gradient steps on the matching objective, halving the
    step until the objective decreases.  The restart with the lowest final
    objective wins (ties go to the earlier restart).  ``mse`` is measured
    against ``true_batch`` features as-is, without re-ordering samples.
    """
    target = np.asarray(received_gamma, dtype=np.float64)
    if target.shape != (spec.n_params,):
        raise ParameterError(f"received gamma has shape {target.shape}, expected ({spec.n_params},)")
    n, d = batch_shape
    if d != spec.dim or n < 1:
        raise ParameterError(f"batch shape {batch_shape} incompatible with model dim {spec.dim}")
    x_true = None
    if true_batch is not None:
        x_true = np.asarray(getattr(true_batch, "features", true_batch), dtype=np.float64)

    best, aborted = None, 0
    for r in range(cfg.restarts):
        rng = SeededRng(cfg.init_seed, stream_id("dlg", r))
        x0 = rng.uniform(0.0, 1.0, (n, d))
        l0 = rng.normal((n, spec.n_classes))
        with np.errstate(all="ignore"):
            x, lg, j, used, trace = _descend(spec, victim_theta, target, x0, l0, cfg)
        if not np.isfinite(j):
            aborted += 1
            continue
        if best is None or j < best[2]:
            best = (x, lg, j, used, trace, r)
    if best is None:
        raise ParameterError("every restart produced a non-finite objective")
    x, lg, j, used, trace, r = best
    return ReconstructionResult(
        x_hat=x,
        y_hat=M.softmax(lg),
        mse=mse(x, x_true) if x_true is not None else float("nan"),
        grad_match_residual=j,
        iterations_used=used,
        restart=r,
        aborted_restarts=aborted,
        objective_trace=trace,
    )


def attack_client(state, victim: int, cfg: AttackConfig = AttackConfig()) -> ReconstructionResult:
    """Attack the tracking variable ``victim`` transmits in ``state``'s round."""
    if not 0 <= victim < state.n:
        raise ParameterError(f"victim {victim} outside 0..{state.n - 1}")
    c = state.clients[victim]
    true = c.shard.features[c.batch_indices]
    return dlg_attack(state.config.model, c.theta, c.gamma, true.shape, true, cfg)
