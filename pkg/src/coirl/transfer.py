"""Zero-shot transfer to unseen contexts from a library of solved contexts.

With context-independent dynamics a library of successor features lets the
agent act by generalized policy improvement (GPI) without planning.  With
contextual dynamics the nearest library policy is reused and its guarantee is
reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from coirl.cmdp import as_matrix, check_context
from coirl.errors import InvalidArgument, InvalidState, UnsupportedDynamics
from coirl.expert import plan_contexts
from coirl.planner import DEFAULT_CONFIG


@dataclass(frozen=True)
class LibraryEntry:
    context: np.ndarray
    policy: np.ndarray
    values: np.ndarray
    psi: np.ndarray | None = None


@dataclass
class PolicyLibrary:
    """Optimal policies for a reward mapping at a set of source contexts."""

    cmdp: object
    W: np.ndarray
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def contexts(self):
        return np.stack([e.context for e in self.entries])

    def psi_stack(self):
        return np.stack([e.psi for e in self.entries])

    def to_dict(self):
        return {
            "W": self.W.tolist(),
            "contexts": [e.context.tolist() for e in self.entries],
            "policies": [e.policy.tolist() for e in self.entries],
        }


def build_library(cmdp, W, contexts, cfg=DEFAULT_CONFIG):
    """Plan ``W`` at every context and store policies, values and successor features.

    Successor features are only meaningful when the dynamics are shared, so
    they are computed in that case alone.
    """
    W = np.asarray(as_matrix(W), dtype=float)
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    if len(contexts) == 0:
        raise InvalidArgument("library needs at least one context")
    policies, values = plan_contexts(cmdp, W, contexts, cfg)
    lib = PolicyLibrary(cmdp, W)
    shared = cmdp.context_independent
    dyn = cmdp.dynamics(contexts[0]) if shared else None
    for j, c in enumerate(contexts):
        psi = None
        if shared:
            mu = dyn.solve_policy(policies[j], cmdp.features, cmdp.gamma)
            psi = cmdp.features[:, None, :] + cmdp.gamma * dyn.expect(mu)
        lib.entries.append(LibraryEntry(check_context(c, cmdp.d), policies[j], values[:, j], psi))
    return lib


def subsample_library(lib, size):
    """Farthest-point subsample (l-inf distance) starting from the first entry."""
    if size >= len(lib):
        return lib
    C = lib.contexts
    chosen = [0]
    dist = np.abs(C - C[0]).max(axis=1)
    while len(chosen) < size:
        j = int(np.argmax(dist))
        chosen.append(j)
        dist = np.minimum(dist, np.abs(C - C[j]).max(axis=1))
    return PolicyLibrary(lib.cmdp, lib.W, [lib.entries[j] for j in sorted(chosen)])


def gpi_q_values(lib, c, W=None):
    """``max_j f_W(c) . psi_j(s, a)`` as an ``(S, A)`` array."""
    if not lib.cmdp.context_independent:
        raise UnsupportedDynamics("GPI needs context-independent dynamics; use nearest_transfer")
    if len(lib) == 0:
        raise InvalidState("policy library is empty")
    c = check_context(c, lib.cmdp.d)
    W = lib.W if W is None else as_matrix(W)
    weights = c @ W
    return np.einsum("jsak,k->jsa", lib.psi_stack(), weights).max(axis=0)


def gpi_policy(lib, c, W=None):
    """Act greedily on the best library Q-value at each state (lowest action on ties)."""
    return gpi_q_values(lib, c, W).argmax(axis=1)


def linf_distances(lib, c):
    return np.abs(lib.contexts - np.asarray(c, dtype=float)).max(axis=1)


@dataclass(frozen=True)
class TransferBoundInputs:
    phi_max: float
    v_max: float
    d: int
    gamma: float
    context_dependent: bool

    def __post_init__(self):
        if self.phi_max < 0 or self.v_max < 0:
            raise InvalidArgument("phi_max and v_max must be non-negative")


def transfer_bound(inputs, dist):
    """Value loss bound for reusing a policy solved at distance ``dist`` (l-inf).

    Contextual dynamics: ``2 (phi_max + gamma d V_max) / (gamma (1-gamma)) * dist``.
    Shared dynamics: ``2 phi_max / (1-gamma) * dist``.
    """
    if dist < 0:
        raise InvalidArgument("distance must be non-negative")
    g = inputs.gamma
    if inputs.context_dependent:
        if g == 0.0:
            return math.inf if dist > 0 else 0.0
        return 2.0 * (inputs.phi_max + g * inputs.d * inputs.v_max) / (g * (1.0 - g)) * dist
    return 2.0 * inputs.phi_max / (1.0 - g) * dist


def simplex_transfer_bound(d, gamma, dist):
    """Contextual-dynamics bound when ``W`` lies on the simplex: ``2(1-g+g d)/(g (1-g)^2) * dist``."""
    return 2.0 * (1.0 - gamma + gamma * d) / (gamma * (1.0 - gamma) ** 2) * dist


def phi_max(W, features):
    """``max_s ||W phi(s)||_1``."""
    return float(np.abs(features @ as_matrix(W).T).sum(axis=1).max())


def bound_inputs(lib):
    v_max = max(float(np.abs(e.values).max()) for e in lib.entries)
    return TransferBoundInputs(
        phi_max=phi_max(lib.W, lib.cmdp.features),
        v_max=v_max,
        d=lib.cmdp.d,
        gamma=lib.cmdp.gamma,
        context_dependent=not lib.cmdp.context_independent,
    )


def gpi_bound(lib, c):
    """Shared-dynamics GPI guarantee ``2 phi_max / (1-gamma) * min_j ||c - c_j||_inf``."""
    inputs = bound_inputs(lib)
    return 2.0 * inputs.phi_max / (1.0 - inputs.gamma) * float(linf_distances(lib, c).min())


def nearest_transfer(lib, c):
    """Reuse the policy of the closest library context.

    Returns ``(policy, bound, index)``.
    """
    if len(lib) == 0:
        raise InvalidState("policy library is empty")
    c = check_context(c, lib.cmdp.d)
    dists = linf_distances(lib, c)
    j = int(np.argmin(dists))
    return lib.entries[j].policy, transfer_bound(bound_inputs(lib), float(dists[j])), j
