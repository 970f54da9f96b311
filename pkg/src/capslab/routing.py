"""Routing strategies mapping votes [..., N, M, d] onto output capsules [..., M, d].

Four interchangeable regimes:

* ``dynamic``   -- iterative agreement routing, full backprop through the loop
* ``rolled``    -- same forward, but coupling coefficients treated as constants
                   during backprop (only the final-iteration coupling term kept)
* ``trainable`` -- one-step routing from learnable prior logits
* ``none``      -- every coupling coefficient fixed at 1/M (uniform routing)

All functions accept an arbitrary number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import ShapeError, softmax, softmax_backward, squash, squash_backward

ROUTING_KINDS = ("dynamic", "rolled", "trainable", "none")


@dataclass
class RoutingConfig:
    kind: str = "dynamic"
    iterations: int = 3  # used by dynamic/rolled

    def __post_init__(self):
        if self.kind not in ROUTING_KINDS:
            raise ValueError(f"unknown routing kind {self.kind!r}; "
                             f"expected one of {ROUTING_KINDS}")
        if self.iterations < 1:
            raise ValueError("routing iterations must be >= 1")


@dataclass
class CouplingState:
    """Everything the backward pass needs from an iterative routing forward.

    Lists are indexed by iteration t = 0..K-1: ``coeffs[t]`` are the coupling
    coefficients used in iteration t, ``raw[t]`` / ``out[t]`` the pre- and
    post-squash capsules, ``agreements[t]`` the per-iteration inner products
    v_j . u_hat (only t = 0..K-2 feed later coefficient updates).
    """
    prior_logits: np.ndarray
    coeffs: list = field(default_factory=list)     # [..., N, M] per iteration
    raw: list = field(default_factory=list)        # [..., M, d] per iteration
    out: list = field(default_factory=list)        # [..., M, d] per iteration
    agreements: list = field(default_factory=list)  # [..., N, M] per iteration
    squash_epsilon: float = 1e-8

    @property
    def iterations(self) -> int:
        return len(self.coeffs)


def _check_votes(votes):
    if votes.ndim < 3:
        raise ShapeError(f"routing: votes need at least [N, M, d] axes, "
                         f"got shape {votes.shape}")


def route_uniform(votes: np.ndarray, squash_epsilon: float = 1e-8):
    """Uniform routing: every c_ij = 1/M, so s_j is the 1/M-weighted vote sum."""
    _check_votes(votes)
    M = votes.shape[-2]
    c = np.full(votes.shape[:-1], 1.0 / M, dtype=votes.dtype)
    s = votes.sum(axis=-3) / M
    v = squash(s, squash_epsilon)
    return v, c


def route_uniform_backward(votes, grad_v, squash_epsilon: float = 1e-8):
    M = votes.shape[-2]
    s = votes.sum(axis=-3) / M
    gs = squash_backward(s, grad_v, squash_epsilon)
    return np.broadcast_to(gs[..., None, :, :] / M, votes.shape).copy()


def route_dynamic(votes: np.ndarray, config: RoutingConfig,
                  prior_logits: np.ndarray | None = None,
                  squash_epsilon: float = 1e-8):
    """Iterative agreement routing.

    Per iteration t: s_j from the current coefficients, v_j = squash(s_j), and
    the next coefficients are a softmax over classes of the prior logits plus
    the cumulative agreement sum_{r<=t} v_j^(r) . u_hat_{j|i}. Returns the
    final v and the complete per-iteration history.
    """
    _check_votes(votes)
    N, M = votes.shape[-3], votes.shape[-2]
    if prior_logits is None:
        prior_logits = np.zeros((N, M), dtype=votes.dtype)
    if prior_logits.shape[-2:] != (N, M):
        raise ShapeError(f"routing: prior logits shape {prior_logits.shape} "
                         f"does not end in (N={N}, M={M})")
    state = CouplingState(prior_logits=prior_logits,
                          squash_epsilon=squash_epsilon)
    batch = votes.shape[:-3]
    c = np.broadcast_to(softmax(prior_logits, axis=-1),
                        batch + (N, M)).astype(votes.dtype)
    cumulative = np.zeros(batch + (N, M), dtype=votes.dtype)
    v = None
    for t in range(config.iterations):
        s = np.einsum("...nm,...nmd->...md", c, votes, optimize=True)
        v = squash(s, squash_epsilon)
        state.coeffs.append(c)
        state.raw.append(s)
        state.out.append(v)
        if t < config.iterations - 1:
            a = np.einsum("...md,...nmd->...nm", v, votes, optimize=True)
            state.agreements.append(a)
            cumulative = cumulative + a
            c = softmax(prior_logits + cumulative, axis=-1)
    return v, state


def routing_backward(votes: np.ndarray, state: CouplingState,
                     grad_v: np.ndarray, mode: str = "unrolled") -> np.ndarray:
    """Gradient of the routed output w.r.t. the votes.

    ``unrolled`` backpropagates through every iteration, including the paths
    into the coupling coefficients. ``rolled`` keeps only the final-iteration
    term, treating the coefficients as constants.
    """
    if state.iterations == 0 or state.coeffs[0].shape[-2:] != votes.shape[-3:-1]:
        raise ShapeError("routing_backward: coupling state does not match votes")
    eps = state.squash_epsilon
    K = state.iterations
    if mode == "rolled":
        gs = squash_backward(state.raw[-1], grad_v, eps)
        return np.einsum("...nm,...md->...nmd", state.coeffs[-1], gs,
                         optimize=True)
    if mode != "unrolled":
        raise ValueError(f"unknown backward mode {mode!r}")

    grad_votes = np.zeros_like(votes)
    grad_cum = None  # accumulated grad w.r.t. the running agreement sum
    gv = grad_v
    for t in reversed(range(K)):
        gs = squash_backward(state.raw[t], gv, eps)
        grad_votes += np.einsum("...nm,...md->...nmd", state.coeffs[t], gs,
                                optimize=True)
        grad_c = np.einsum("...md,...nmd->...nm", gs, votes, optimize=True)
        if t == 0:
            break
        gc_logits = softmax_backward(state.coeffs[t], grad_c, axis=-1)
        grad_cum = gc_logits if grad_cum is None else grad_cum + gc_logits
        # cumulative agreement at t-1 splits into a_{t-1} = v^(t-1) . votes
        v_prev = state.out[t - 1]
        grad_votes += grad_cum[..., None] * v_prev[..., None, :, :]
        gv = np.einsum("...nm,...nmd->...md", grad_cum, votes, optimize=True)
    return grad_votes


def route_trainable(votes: np.ndarray, prior_logits: np.ndarray,
                    squash_epsilon: float = 1e-8):
    """One-step routing with learnable prior logits [N, M].

    Coefficients are softmax(prior_logits) over classes: input-independent,
    identical for every example, fixed at inference.
    """
    _check_votes(votes)
    N, M = votes.shape[-3], votes.shape[-2]
    if prior_logits.shape != (N, M):
        raise ShapeError(f"route_trainable: prior logits shape "
                         f"{prior_logits.shape} != ({N}, {M})")
    c = softmax(prior_logits, axis=-1)
    s = np.einsum("nm,...nmd->...md", c, votes, optimize=True)
    v = squash(s, squash_epsilon)
    batch = votes.shape[:-3]
    return v, np.broadcast_to(c, batch + (N, M)).astype(votes.dtype)


def route_trainable_backward(votes, prior_logits, grad_v,
                             squash_epsilon: float = 1e-8):
    """Gradients of route_trainable w.r.t. (votes, prior_logits)."""
    c = softmax(prior_logits, axis=-1)
    s = np.einsum("nm,...nmd->...md", c, votes, optimize=True)
    gs = squash_backward(s, grad_v, squash_epsilon)
    grad_votes = np.einsum("nm,...md->...nmd", c, gs, optimize=True)
    grad_c = np.einsum("...md,...nmd->...nm", gs, votes, optimize=True)
    # sum softmax VJP over batch axes: the same logits served every example
    extra = grad_c.ndim - 2
    if extra:
        grad_c = grad_c.sum(axis=tuple(range(extra)))
    grad_logits = softmax_backward(c, grad_c, axis=-1)
    return grad_votes, grad_logits


def agreement_objective(votes: np.ndarray, c: np.ndarray, target_class):
    """Agreement split by class: (target term, non-target term, difference).

    The per-class agreement is the inner product of the coupled vote sum s_j
    with its squashed image; the objective is the target-class agreement minus
    the summed agreement of all other classes.
    """
    _check_votes(votes)
    s = np.einsum("...nm,...nmd->...md", c, votes, optimize=True)
    v = squash(s)
    per_class = np.einsum("...md,...md->...m", s, v, optimize=True)
    target_class = np.asarray(target_class)
    target_term = np.take_along_axis(
        per_class, target_class.reshape(target_class.shape + (1,)), axis=-1
    )[..., 0] if per_class.ndim > 1 else per_class[target_class]
    nontarget_term = per_class.sum(axis=-1) - target_term
    return target_term, nontarget_term, target_term - nontarget_term
