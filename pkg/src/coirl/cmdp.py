"""Contextual MDP data model.

A contextual MDP carries ``d`` base transition kernels, one feature vector per
state, an initial distribution and a discount.  A context ``c`` on the
probability simplex selects the kernel ``sum_i c_i P_i`` and, together with a
reward mapping ``W`` (``d x k``), the state reward ``(c^T W) . phi(s)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from coirl.errors import InvalidArgument, InvalidContext, SchemaError

SIMPLEX_TOL = 1e-9
GEOMETRIES = ("ball", "simplex", "box")

# Planner switches to CSR kernels above this size when the kernel is sparse.
_SPARSE_MIN_STATES = 500
_SPARSE_MAX_DENSITY = 0.05
# Rows already within round-off of 1 are left alone so shared read-only views stay shared.
_RENORM_MIN = 1e-14


def outer_flatten(u, v):
    """Return ``u ⊙ v``: the row-major flattened outer product.

    ``result[i * len(v) + j] == u[i] * v[j]``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim != 1 or v.ndim != 1:
        raise InvalidArgument(f"outer_flatten expects vectors, got shapes {u.shape} and {v.shape}")
    return np.outer(u, v).ravel()


def check_context(c, d):
    """Validate a simplex point of dimension ``d`` and return it as an array.

    Entries may undershoot zero or miss the unit sum by ``SIMPLEX_TOL``; such
    points are clipped and renormalized.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (d,):
        raise InvalidArgument(f"context must have shape ({d},), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidContext("context has non-finite entries")
    if c.min() < -SIMPLEX_TOL or abs(c.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidContext(f"context is off the simplex (min={c.min():.3g}, sum={c.sum():.12g})")
    if c.min() < 0.0 or c.sum() != 1.0:
        c = np.clip(c, 0.0, None)
        c = c / c.sum()
    return c


def in_geometry(W, geometry, tol=SIMPLEX_TOL):
    """True when ``W`` lies in the named constraint set (within ``tol``)."""
    W = np.asarray(W, dtype=float)
    if geometry == "ball":
        return bool(np.linalg.norm(W) <= 1.0 + tol)
    if geometry == "simplex":
        return bool(W.min() >= -tol and abs(W.sum() - 1.0) <= tol)
    if geometry == "box":
        return bool(np.abs(W).max() <= 1.0 + tol)
    raise InvalidArgument(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")


def project(W, geometry):
    """Map ``W`` back into a geometry.

    The ball always renormalizes to the unit sphere, the simplex renormalizes
    by the l1 mass, and the box clips entry-wise.
    """
    W = np.asarray(W, dtype=float)
    if geometry == "ball":
        norm = np.linalg.norm(W)
        if norm == 0.0:
            raise InvalidArgument("cannot normalize a zero matrix onto the unit sphere")
        return W / norm
    if geometry == "simplex":
        W = np.clip(W, 0.0, None)
        total = W.sum()
        if total == 0.0:
            raise InvalidArgument("cannot renormalize a zero matrix onto the simplex")
        return W / total
    if geometry == "box":
        return np.clip(W, -1.0, 1.0)
    raise InvalidArgument(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")


@dataclass(frozen=True)
class RewardMapping:
    """A ``d x k`` context-to-reward matrix tagged with its constraint set."""

    W: np.ndarray
    geometry: str = "ball"

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2:
            raise InvalidArgument(f"W must be a matrix, got shape {W.shape}")
        if self.geometry not in GEOMETRIES:
            raise InvalidArgument(f"unknown geometry {self.geometry!r}")
        if not in_geometry(W, self.geometry):
            raise InvalidArgument(f"W does not lie in the {self.geometry} geometry")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def flat(self):
        return self.W.ravel()


def as_matrix(W):
    """Accept a RewardMapping or a bare array and return the matrix."""
    if isinstance(W, RewardMapping):
        return W.W
    return np.asarray(W, dtype=float)


class Dynamics:
    """A single ``[S][A][S]`` kernel plus the linear-algebra views planners need.

    Large sparse kernels (driving simulator, stacked MDPs) are planned through a
    CSR copy; small or dense kernels stay dense.
    """

    def __init__(self, kernel):
        self.kernel = kernel
        self.n_states, self.n_actions = kernel.shape[0], kernel.shape[1]

    @cached_property
    def is_sparse(self):
        if self.n_states < _SPARSE_MIN_STATES:
            return False
        nnz = np.count_nonzero(self.kernel)
        return nnz <= _SPARSE_MAX_DENSITY * self.kernel.size

    @cached_property
    def matrix(self):
        flat = self.kernel.reshape(self.n_states * self.n_actions, self.n_states)
        if self.is_sparse:
            return sp.csr_matrix(flat)
        return np.ascontiguousarray(flat)

    def expect(self, values):
        """``E[V(s') | s, a]`` for ``values`` of shape ``(S,)`` or ``(S, B)``."""
        out = self.matrix @ values
        return np.asarray(out).reshape((self.n_states, self.n_actions) + np.shape(values)[1:])

    def policy_matrix(self, policy):
        rows = np.arange(self.n_states) * self.n_actions + np.asarray(policy)
        return self.matrix[rows]

    def mean_action_matrix(self):
        """Kernel of the uniform-random policy."""
        if self.is_sparse:
            blocks = [self.matrix[np.arange(self.n_states) * self.n_actions + a] for a in range(self.n_actions)]
            return sum(blocks[1:], blocks[0]) / self.n_actions
        return self.kernel.mean(axis=1)

    def solve(self, transition, rhs, gamma):
        """Solve ``(I - gamma * transition) x = rhs`` for a state-to-state kernel."""
        if sp.issparse(transition):
            system = sp.identity(self.n_states, format="csc") - gamma * transition.tocsc()
            return spla.splu(system).solve(np.asarray(rhs, dtype=float))
        system = np.eye(self.n_states) - gamma * transition
        return np.linalg.solve(system, rhs)

    def solve_policy(self, policy, rhs, gamma):
        return self.solve(self.policy_matrix(policy), rhs, gamma)


@dataclass(frozen=True, eq=False)
class ContextualMDP:
    """Tabular contextual MDP with linear-in-context dynamics.

    Attributes:
        base_kernels: ``(d, S, A, S)`` array; every ``[i, s, a]`` row is a
            distribution over next states.
        features: ``(S, k)`` state features.  Entries are allowed in
            ``[-1, 1]`` so that distinguished terminal states can carry negative
            markers.
        xi: initial state distribution.
        gamma: discount in ``[0, 1)``.
        w_star: optional ground-truth mapping stored with the environment.
        geometry: constraint set ``w_star`` is declared in, if any.
    """

    base_kernels: np.ndarray
    features: np.ndarray
    xi: np.ndarray
    gamma: float
    w_star: np.ndarray | None = None
    geometry: str | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        kernels = np.asarray(self.base_kernels, dtype=float)
        if kernels.flags.writeable:
            kernels = kernels.copy()
        if kernels.ndim == 3:
            kernels = kernels[None]
        if kernels.ndim != 4 or kernels.shape[1] != kernels.shape[3]:
            raise InvalidArgument(f"base_kernels must have shape (d, S, A, S), got {kernels.shape}")
        d, S, A, _ = kernels.shape
        if d < 1 or S < 1 or A < 1:
            raise InvalidArgument("CMDP needs at least one kernel, state and action")
        if (kernels < 0).any():
            raise InvalidArgument("transition probabilities must be non-negative")
        sums = kernels.sum(axis=-1)
        err = np.abs(sums - 1.0).max()
        if err > SIMPLEX_TOL:
            raise InvalidArgument(f"kernel rows must sum to 1 (max deviation {err:.3g})")
        if err > _RENORM_MIN:
            kernels = kernels / sums[..., None]

        features = np.array(self.features, dtype=float)
        if features.ndim != 2 or features.shape[0] != S:
            raise InvalidArgument(f"features must have shape ({S}, k), got {features.shape}")
        if np.abs(features).max(initial=0.0) > 1.0:
            raise InvalidArgument("feature entries must lie in [-1, 1]")

        xi = np.array(self.xi, dtype=float)
        if xi.shape != (S,) or xi.min() < 0 or abs(xi.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidArgument("xi must be a distribution over states")
        xi = xi / xi.sum()

        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")

        w_star = self.w_star
        if w_star is not None:
            w_star = np.array(w_star, dtype=float)
            if w_star.shape != (d, features.shape[1]):
                raise InvalidArgument(f"w_star must have shape {(d, features.shape[1])}, got {w_star.shape}")
            w_star.setflags(write=False)
        if self.geometry is not None and self.geometry not in GEOMETRIES:
            raise InvalidArgument(f"unknown geometry {self.geometry!r}")

        for arr in (kernels, features, xi):
            if arr.flags.writeable:
                arr.setflags(write=False)
        object.__setattr__(self, "base_kernels", kernels)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "w_star", w_star)

    @property
    def d(self):
        return self.base_kernels.shape[0]

    @property
    def n_states(self):
        return self.base_kernels.shape[1]

    @property
    def n_actions(self):
        return self.base_kernels.shape[2]

    @property
    def k(self):
        return self.features.shape[1]

    @cached_property
    def context_independent(self):
        """True when every base kernel equals the first within 1e-12."""
        kernels = self.base_kernels
        if self.d == 1 or kernels.strides[0] == 0:
            return True
        return all(np.abs(kernels[i] - kernels[0]).max() <= 1e-12 for i in range(1, self.d))

    @cached_property
    def _shared_dynamics(self):
        return Dynamics(self.base_kernels[0])

    def kernel(self, c):
        c = check_context(c, self.d)
        if self.context_independent:
            return self.base_kernels[0]
        return np.tensordot(c, self.base_kernels, axes=1)

    def dynamics(self, c):
        """Planner view of ``P_c``; shared across contexts when dynamics do not depend on c."""
        if self.context_independent:
            check_context(c, self.d)
            return self._shared_dynamics
        return Dynamics(self.kernel(c))

    def reward(self, c, W):
        """State reward ``(c^T W) . phi(s)``."""
        c = check_context(c, self.d)
        W = as_matrix(W)
        if W.shape != (self.d, self.k):
            raise InvalidArgument(f"W must have shape {(self.d, self.k)}, got {W.shape}")
        return self.features @ (c @ W)


@dataclass(frozen=True, eq=False)
class InstantiatedMDP:
    """The ordinary MDP selected by one context and one reward mapping."""

    dynamics: Dynamics
    reward: np.ndarray
    features: np.ndarray
    xi: np.ndarray
    gamma: float

    @property
    def kernel(self):
        return self.dynamics.kernel

    @property
    def n_states(self):
        return self.dynamics.n_states

    @property
    def n_actions(self):
        return self.dynamics.n_actions


def instantiate(cmdp, c, W=None):
    """Build ``M(c)``: mixed kernel ``sum_i c_i P_i`` and reward ``(c^T W) . phi``.

    With ``W=None`` the CMDP's stored ``w_star`` is used.
    """
    if W is None:
        if cmdp.w_star is None:
            raise InvalidArgument("no reward mapping given and the CMDP has no w_star")
        W = cmdp.w_star
    c = check_context(c, cmdp.d)
    return InstantiatedMDP(
        dynamics=cmdp.dynamics(c),
        reward=cmdp.reward(c, W),
        features=cmdp.features,
        xi=cmdp.xi,
        gamma=cmdp.gamma,
    )


def mdp_from_reward(cmdp, c, reward):
    """Instantiate ``M(c)`` with an explicit state reward vector."""
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (cmdp.n_states,):
        raise InvalidArgument(f"reward must have shape ({cmdp.n_states},)")
    return InstantiatedMDP(cmdp.dynamics(c), reward, cmdp.features, cmdp.xi, cmdp.gamma)


# ---------------------------------------------------------------------------
# JSON round trip

_REQUIRED_KEYS = ("n_states", "n_actions", "d", "k", "gamma", "features", "xi")


def cmdp_to_dict(cmdp, sparse=False):
    """Serialize to plain Python containers.

    Dense documents carry ``base_kernels`` as nested lists.  With
    ``sparse=True`` the kernels go under ``base_kernels_sparse`` as COO
    triplets, and a context-independent CMDP stores its kernel once.
    """
    doc = {
        "n_states": cmdp.n_states,
        "n_actions": cmdp.n_actions,
        "d": cmdp.d,
        "k": cmdp.k,
        "gamma": cmdp.gamma,
        "features": cmdp.features.tolist(),
        "xi": cmdp.xi.tolist(),
    }
    if sparse:
        shared = cmdp.context_independent
        kernels = cmdp.base_kernels[:1] if shared else cmdp.base_kernels
        idx = np.nonzero(kernels)
        doc["base_kernels_sparse"] = {
            "shared": bool(shared),
            "index": [i.tolist() for i in idx],
            "value": kernels[idx].tolist(),
        }
    else:
        doc["base_kernels"] = cmdp.base_kernels.tolist()
    if cmdp.w_star is not None:
        doc["w_star"] = cmdp.w_star.tolist()
    if cmdp.geometry is not None:
        doc["geometry"] = cmdp.geometry
    if cmdp.name:
        doc["name"] = cmdp.name
    return doc


def cmdp_from_dict(doc):
    missing = [key for key in _REQUIRED_KEYS if key not in doc]
    if missing:
        raise SchemaError(f"CMDP document is missing keys: {missing}")
    d, S, A = int(doc["d"]), int(doc["n_states"]), int(doc["n_actions"])
    if "base_kernels" in doc:
        kernels = np.asarray(doc["base_kernels"], dtype=float)
    elif "base_kernels_sparse" in doc:
        blob = doc["base_kernels_sparse"]
        n_stored = 1 if blob.get("shared") else d
        stored = np.zeros((n_stored, S, A, S))
        stored[tuple(np.asarray(i, dtype=int) for i in blob["index"])] = blob["value"]
        kernels = np.broadcast_to(stored, (d, S, A, S)) if blob.get("shared") else stored
    else:
        raise SchemaError("CMDP document has neither base_kernels nor base_kernels_sparse")
    if kernels.shape != (d, S, A, S):
        raise SchemaError(f"base_kernels shape {kernels.shape} does not match header {(d, S, A, S)}")
    features = np.asarray(doc["features"], dtype=float)
    if features.shape != (S, int(doc["k"])):
        raise SchemaError(f"features shape {features.shape} does not match header")
    return ContextualMDP(
        base_kernels=kernels,
        features=features,
        xi=np.asarray(doc["xi"], dtype=float),
        gamma=float(doc["gamma"]),
        w_star=None if doc.get("w_star") is None else np.asarray(doc["w_star"], dtype=float),
        geometry=doc.get("geometry"),
        name=doc.get("name", ""),
    )


def save_cmdp(cmdp, path, sparse=False):
    """Write the CMDP as one JSON document (floats use shortest exact repr)."""
    Path(path).write_text(json.dumps(cmdp_to_dict(cmdp, sparse=sparse)))


def load_cmdp(path):
    return cmdp_from_dict(json.loads(Path(path).read_text()))
