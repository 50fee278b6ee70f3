"""Variance and convergence-gap bounds driving the pricing game.

These stand in for the expected final loss throughout the game: the server
prices participation against the gap bound, never against actual training.
Per-client terms are summed with compensated (Neumaier) summation in index
order so results are bit-for-bit deterministic across runs.
"""

from __future__ import annotations

import math

from .core import ClientProfile, GameConstants, ParticipationVector


def neumaier_sum(values) -> float:
    """Compensated summation in iteration order."""
    total = 0.0
    comp = 0.0
    for v in values:
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def _check_positive(q: ParticipationVector) -> None:
    for n, qn in enumerate(q.q):
        if qn <= 0.0:
            raise ValueError(f"client {n}: participation probability must be positive, got {qn}")


def participation_penalty(q: ParticipationVector, profiles: list) -> float:
    """sum_n (1 - q_n) a_n^2 G_n^2 / q_n, the data-weighted participation deficit."""
    _check_positive(q)
    return neumaier_sum(
        (1.0 - qn) * p.weight**2 * p.grad_bound**2 / qn for qn, p in zip(q.q, profiles)
    )


def variance_bound(
    q: ParticipationVector, profiles: list, eta: float, local_steps: int
) -> float:
    """Upper bound on the aggregation variance injected by randomized participation.

    Returns 4 * sum_n (1 - q_n) a_n^2 G_n^2 / q_n * (eta * E)^2.
    """
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    return 4.0 * participation_penalty(q, profiles) * (eta * local_steps) ** 2


def convergence_gap_bound(
    q: ParticipationVector, profiles: list, constants: GameConstants
) -> float:
    """Upper bound on the optimality gap after the full round budget.

    Returns (1/R) * (alpha * sum_n (1 - q_n) a_n^2 G_n^2 / q_n + beta).
    """
    return (constants.alpha * participation_penalty(q, profiles) + constants.beta) / constants.rounds


def bound_gradient(
    q: ParticipationVector, profiles: list, constants: GameConstants
) -> list:
    """Analytic per-client derivative of the gap bound: -(alpha/R) a_n^2 G_n^2 / q_n^2.

    Strictly negative in every component: more participation always tightens
    the bound.
    """
    _check_positive(q)
    scale = constants.alpha / constants.rounds
    return [
        -scale * p.weight**2 * p.grad_bound**2 / qn**2 for qn, p in zip(q.q, profiles)
    ]


def bound_term(profile: ClientProfile, constants: GameConstants) -> float:
    """(alpha/R) a_n^2 G_n^2, the client's coefficient in the gap bound."""
    return constants.alpha / constants.rounds * profile.weight**2 * profile.grad_bound**2
