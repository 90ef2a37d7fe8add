"""Numerical certificate for the weight dynamics of repeated experts averaging.

A trajectory alternates ``W[s+1] = Wbar[s] + lr * delta[s]`` (a recorded update
direction) with ``Wbar[s+1] = mix(W[s+1], beta)``.  Unrolling m steps gives a
closed form in the window's starting weights, the update directions and the
other experts' pre-mix weights; the checks below evaluate that closed form from
the records and compare against the iterated weights.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ewa import ewa_mix
from .ffn import FFN_FIELDS, FFNParams
from .moe import RUP, MoELayer
from .tensor import Tensor, backward, mul, sub, tsum


@dataclass
class Trajectory:
    pre: np.ndarray  # [m+1, N, P] weights before each mix
    post: np.ndarray  # [m+1, N, P] weights after each mix
    deltas: np.ndarray  # [m, N, P] update directions applied between mixes
    lr: float
    betas: np.ndarray  # [m+1] share rate of each mix
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        m = self.deltas.shape[0]
        if self.pre.shape[0] != m + 1 or self.post.shape[0] != m + 1 or len(self.betas) != m + 1:
            raise ValueError("trajectory needs m+1 snapshots, m+1 betas and m update directions")

    @property
    def steps(self) -> int:
        return self.deltas.shape[0]

    @property
    def num_experts(self) -> int:
        return self.pre.shape[1]

    def window(self, start: int, stop: int) -> Trajectory:
        """Sub-trajectory covering mixes ``start..stop`` inclusive."""
        return Trajectory(self.pre[start:stop + 1], self.post[start:stop + 1],
                          self.deltas[start:stop], self.lr, self.betas[start:stop + 1],
                          self.losses[start:stop])

    def constant_beta(self) -> float:
        if not np.all(self.betas == self.betas[0]):
            raise ValueError("closed form assumes a constant share rate over the window; "
                             "split with constant_beta_windows()")
        return float(self.betas[0])


def flatten_experts(experts: list[FFNParams]) -> np.ndarray:
    return np.stack([np.concatenate([getattr(e, n).data.ravel() for n in FFN_FIELDS]) for e in experts])


def _load_flat(experts: list[FFNParams], flat: np.ndarray) -> None:
    for e, row in zip(experts, flat):
        offset = 0
        for n in FFN_FIELDS:
            t = getattr(e, n)
            t.data = row[offset:offset + t.size].reshape(t.shape).copy()
            offset += t.size


def probe_layer(num_experts: int = 4, d_model: int = 3, d_hidden: int = 5,
                rng: np.random.Generator | None = None) -> MoELayer:
    """Tiny RUP layer with independently random experts."""
    rng = rng or np.random.default_rng(0)
    experts = [FFNParams.from_arrays({
        "w1": rng.standard_normal((d_model, d_hidden)), "b1": rng.standard_normal(d_hidden),
        "w2": rng.standard_normal((d_hidden, d_model)), "b2": rng.standard_normal(d_model),
    }) for _ in range(num_experts)]
    return MoELayer(experts, RUP)


def quadratic_loss(layer: MoELayer, rng: np.random.Generator) -> Callable[[MoELayer], Tensor]:
    """Random separable quadratic ``sum c * (w - target)^2 / 2`` over all expert weights."""
    coef, target = {}, {}
    for i, e in enumerate(layer.experts):
        for n in FFN_FIELDS:
            shape = getattr(e, n).shape
            coef[i, n] = rng.uniform(0.5, 2.0, shape)
            target[i, n] = rng.standard_normal(shape)

    def loss(lyr: MoELayer) -> Tensor:
        total = None
        for i, e in enumerate(lyr.experts):
            for n in FFN_FIELDS:
                diff = sub(getattr(e, n), target[i, n])
                term = tsum(mul(mul(diff, diff), 0.5 * coef[i, n]))
                total = term if total is None else total + term
        return total

    return loss


def record_trajectory(layer: MoELayer, loss_fn: Callable[[MoELayer], Tensor], m: int, lr: float,
                      beta: float | Callable[[int], float], sign: float = -1.0) -> Trajectory:
    """Run ``m`` rounds of (gradient step on mixed weights, then mix) on ``layer``.

    ``beta`` is a constant or a function of the mix index (0..m).  The update
    direction is ``sign * grad``; ``sign=-1`` is ordinary descent.  ``layer`` is
    modified in place and ends holding the last mixed weights.
    """
    beta_at = beta if callable(beta) else (lambda _s, b=float(beta): b)
    betas = np.array([beta_at(s) for s in range(m + 1)], dtype=np.float64)
    pre = [flatten_experts(layer.experts)]
    post = [ewa_mix(pre[0], betas[0])]
    deltas, losses = [], []
    for s in range(m):
        _load_flat(layer.experts, post[s])
        for e in layer.experts:
            for n in FFN_FIELDS:
                getattr(e, n).grad = None
        loss = loss_fn(layer)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {s}")
        losses.append(loss.item())
        backward(loss)
        grad = np.stack([np.concatenate([
            (getattr(e, n).grad if getattr(e, n).grad is not None else np.zeros(getattr(e, n).shape)).ravel()
            for n in FFN_FIELDS]) for e in layer.experts])
        delta = sign * grad
        deltas.append(delta)
        pre.append(post[s] + lr * delta)
        post.append(ewa_mix(pre[s + 1], betas[s + 1]))
    _load_flat(layer.experts, post[-1])
    p = pre[0].shape
    return Trajectory(np.stack(pre), np.stack(post),
                      np.stack(deltas) if deltas else np.zeros((0,) + p), lr, betas, losses)


def _others(w: np.ndarray) -> np.ndarray:
    """For each expert i, the sum over j != i of ``w[j]``."""
    return w.sum(axis=0, keepdims=True) - w


def single_step_rhs(traj: Trajectory, s: int) -> np.ndarray:
    """Mixed weights after step ``s+1`` expanded in terms of step-``s`` records."""
    beta, n, lr = traj.constant_beta(), traj.num_experts, traj.lr
    c = beta / (n - 1) if n > 1 else 0.0
    return ((1 - beta) ** 2 * traj.pre[s] + lr * (1 - beta) * traj.deltas[s]
            + c * _others(traj.pre[s + 1]) + c * (1 - beta) * _others(traj.pre[s]))


def verify_single_step(traj: Trajectory) -> float:
    """Max abs gap between each recorded mixed step and its one-step expansion."""
    if traj.steps < 1:
        raise ValueError("need at least one step")
    return max(float(np.max(np.abs(single_step_rhs(traj, s) - traj.post[s + 1])))
               for s in range(traj.steps))


def unrolled_terms(traj: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three terms of the m-step closed form: own start weight, update history,
    cross-expert history."""
    beta, n, lr, m = traj.constant_beta(), traj.num_experts, traj.lr, traj.steps
    c = beta / (n - 1) if n > 1 else 0.0
    own = (1 - beta) ** (m + 1) * traj.pre[0]
    updates = np.zeros_like(own)
    for k in range(1, m + 1):
        updates += (1 - beta) ** k * traj.deltas[m - k]
    cross = np.zeros_like(own)
    for k in range(m + 1):
        cross += (1 - beta) ** (m - k) * _others(traj.pre[k])
    return own, lr * updates, c * cross


def verify_unrolled(traj: Trajectory) -> float:
    """Max abs gap between the closed form and the iterated final mixed weights."""
    if traj.steps < 1:
        raise ValueError("need at least one step")
    own, updates, cross = unrolled_terms(traj)
    return float(np.max(np.abs(own + updates + cross - traj.post[-1])))


def per_step_errors(traj: Trajectory) -> list[dict]:
    rows = []
    for s in range(1, traj.steps + 1):
        sub_traj = traj.window(0, s)
        rows.append({
            "step": s,
            "beta": float(traj.betas[s]),
            "single_step_error": float(np.max(np.abs(single_step_rhs(traj, s - 1) - traj.post[s]))),
            "unrolled_error": verify_unrolled(sub_traj),
        })
    return rows


def constant_beta_windows(traj: Trajectory) -> list[tuple[int, int]]:
    """Maximal ``(start, stop)`` mix-index ranges over which the share rate is constant."""
    out, start = [], 0
    for s in range(1, len(traj.betas) + 1):
        if s == len(traj.betas) or traj.betas[s] != traj.betas[start]:
            if s - 1 > start:
                out.append((start, s - 1))
            start = s
    return out


def verify_piecewise(traj: Trajectory) -> float:
    """Closed-form check over each constant-beta window of a scheduled trajectory."""
    windows = constant_beta_windows(traj)
    if not windows:
        raise ValueError("no window with at least one step at constant beta")
    return max(verify_unrolled(traj.window(a, b)) for a, b in windows)


@dataclass
class DecayHistoryReport:
    beta: float
    steps: int
    num_experts: int
    measured_decay: float
    expected_decay: float
    update_weights: list[float]
    history_weights: list[float]
    history_monotone: bool
    unrolled_error: float
    single_step_error: float

    @property
    def decay_error(self) -> float:
        return abs(self.measured_decay - self.expected_decay)

    def to_text(self) -> str:
        lines = [
            f"experts={self.num_experts} steps={self.steps} beta={self.beta:g}",
            f"single-step identity max abs error: {self.single_step_error:.3e}",
            f"unrolled identity max abs error:    {self.unrolled_error:.3e}",
            f"own-weight decay coefficient: measured {self.measured_decay:.12f}, "
            f"(1-beta)^(m+1) = {self.expected_decay:.12f}, gap {self.decay_error:.3e}",
            "update-direction weights (k=1..m, most recent first): "
            + ", ".join(f"{w:.6g}" for w in self.update_weights),
            "cross-expert history weights (k=0..m, oldest first): "
            + ", ".join(f"{w:.6g}" for w in self.history_weights),
            f"history weights increase toward recent steps: {self.history_monotone}",
        ]
        return "\n".join(lines)


def decay_and_history_report(traj: Trajectory) -> DecayHistoryReport:
    """Fit the coefficient on each expert's starting weights and list the geometric
    weight profiles of the closed form."""
    beta, m, n = traj.constant_beta(), traj.steps, traj.num_experts
    own, updates, cross = unrolled_terms(traj)
    residual = traj.post[-1] - updates - cross
    w0 = traj.pre[0]
    denom = float((w0 * w0).sum())
    measured = float((residual * w0).sum() / denom) if denom > 0 else float("nan")
    c = beta / (n - 1) if n > 1 else 0.0
    history = [c * (1 - beta) ** (m - k) for k in range(m + 1)]
    monotone = all(b > a for a, b in zip(history, history[1:])) if 0 < beta < 1 else False
    return DecayHistoryReport(
        beta=beta, steps=m, num_experts=n,
        measured_decay=measured, expected_decay=(1 - beta) ** (m + 1),
        update_weights=[traj.lr * (1 - beta) ** k for k in range(1, m + 1)],
        history_weights=history, history_monotone=monotone,
        unrolled_error=verify_unrolled(traj) if m >= 1 else 0.0,
        single_step_error=verify_single_step(traj) if m >= 1 else 0.0,
    )


def run_probe(num_experts: int, m: int, beta: float, lr: float = 0.05, seed: int = 0,
              sign: float = -1.0) -> Trajectory:
    rng = np.random.default_rng(seed)
    layer = probe_layer(num_experts, rng=rng)
    return record_trajectory(layer, quadratic_loss(layer, rng), m, lr, beta, sign)


def write_error_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
