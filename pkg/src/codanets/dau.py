"""Dynamic Alignment Units.

A DAU maps an input ``x`` to ``g(A B x + b)^T x`` where ``g`` rescales its
argument so that the dynamic weight vector has norm at most one.  Three
rescalers are supported:

* ``L2``: unit norm,
* ``SQ``: the capsule squashing function,
* ``WB``: weight bounding, which divides by the upper bound
  ``||A||_F ||B x||`` and never forms the d-dimensional weight vector.

Single units are described by :class:`DauParams`; a :class:`DauBank` stacks
``k`` units over a common input dimension and evaluates them on columns of an
unfolded input, which is what the convolutional layers use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


class RescaleKind(str, enum.Enum):
    L2 = "L2"
    SQ = "SQ"
    WB = "WB"

    @classmethod
    def parse(cls, value) -> "RescaleKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractError(f"unknown rescaler {value!r}; expected L2, SQ or WB") from None


def rescale_l2(u, axis=-1) -> Tensor:
    """``u / ||u||``; vectors with norm below the package epsilon map to ~0."""
    u = tn.as_tensor(u)
    norm = tn.l2norm(u, axis=axis, keepdims=True)
    return tn.div(u, norm, eps=tn.get_eps())


def rescale_sq(u, axis=-1) -> Tensor:
    """Squashing: ``L2(u) * ||u||^2 / (1 + ||u||^2)``."""
    u = tn.as_tensor(u)
    norm = tn.l2norm(u, axis=axis, keepdims=True)
    sq = tn.square(norm)
    return tn.div(u, norm, eps=tn.get_eps()) * (sq / (sq + 1.0))


_RESCALERS = {RescaleKind.L2: rescale_l2, RescaleKind.SQ: rescale_sq}


def _param(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=True)


@dataclass
class DauParams:
    """One unit: ``A`` is d x r, ``B`` is r x d, ``b`` has length d (absent for WB)."""

    A: Tensor
    B: Tensor
    b: Tensor | None
    kind: RescaleKind

    def __post_init__(self):
        self.kind = RescaleKind.parse(self.kind)
        self.A = _param(self.A)
        self.B = _param(self.B)
        if self.b is not None:
            self.b = _param(self.b)
        d, r = self.A.shape
        if self.B.shape != (r, d):
            raise DimensionError(f"B must have shape {(r, d)} to match A {self.A.shape}, got {self.B.shape}")
        if r > d:
            raise ContractError(f"rank {r} exceeds input dimension {d}")
        if self.kind is RescaleKind.WB and self.b is not None:
            raise ContractError("WB units have no bias term")
        if self.b is not None and self.b.shape != (d,):
            raise DimensionError(f"bias must have shape {(d,)}, got {self.b.shape}")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, d: int, rank: int, kind="L2", rng=None) -> "DauParams":
        rng = np.random.default_rng(rng)
        kind = RescaleKind.parse(kind)
        lim = 1.0 / np.sqrt(d)
        A = rng.uniform(-lim, lim, size=(d, rank))
        B = rng.uniform(-lim, lim, size=(rank, d))
        b = None if kind is RescaleKind.WB else np.zeros(d)
        return cls(A, B, b, kind)


def _check_vector(p: DauParams, x) -> Tensor:
    x = tn.as_tensor(x)
    if x.shape != (p.d,):
        raise DimensionError(f"input of shape {x.shape} does not match unit dimension {p.d}")
    return x


def dau_forward(p: DauParams, x):
    """Return ``(output, w)`` for an L2 or SQ unit, with ``output = w^T x``."""
    if p.kind is RescaleKind.WB:
        raise ContractError("dau_forward takes L2/SQ units; use edau_forward for WB")
    x = _check_vector(p, x)
    u = tn.matmul(p.A, tn.matmul(p.B, x.reshape(p.d, 1))).reshape(p.d)
    if p.b is not None:
        u = u + p.b
    w = _RESCALERS[p.kind](u)
    return (w * x).sum(), w


def edau_forward(p: DauParams, x):
    """Weight-bounded unit: ``||Bx||^-1 (Bx)^T (A'^T x)`` with ``A' = A / ||A||_F``.

    The output is an r-dimensional dot product.  The second return value is the
    norm bound ``||A||_F ||Bx||`` that replaces ``||ABx||``.
    """
    if p.kind is not RescaleKind.WB or p.b is not None:
        raise ContractError("edau_forward takes bias-free WB units")
    x = _check_vector(p, x)
    col = x.reshape(p.d, 1)
    eps = tn.get_eps()
    fro = tn.frobenius_norm(p.A)
    a_prime = tn.div(p.A, fro, eps=eps)
    bx = tn.matmul(p.B, col).reshape(p.rank)
    ax = tn.matmul(tn.swap_last(a_prime), col).reshape(p.rank)
    norm_bx = tn.l2norm(bx)
    out = tn.div((bx * ax).sum(), norm_bx, eps=eps)
    return out, fro * norm_bx


def dau_weight_materialize(p: DauParams, x) -> np.ndarray:
    """Explicit ``w(x)`` for any rescaler (WB uses ``ABx / (||A||_F ||Bx||)``)."""
    x = _check_vector(p, x)
    with tn.no_grad():
        if p.kind is RescaleKind.WB:
            eps = tn.get_eps()
            A, B = p.A.data, p.B.data
            bx = B @ x.data
            return (A @ bx) / max(np.linalg.norm(A), eps) / max(np.linalg.norm(bx), eps)
        return dau_forward(p, x)[1].data.copy()


def unit_forward(p: DauParams, x) -> Tensor:
    """Scalar output of a unit of any kind."""
    if p.kind is RescaleKind.WB:
        return edau_forward(p, x)[0]
    return dau_forward(p, x)[0]


class DauBank:
    """``k`` DAUs over a common input dimension ``d``.

    Parameters are stored stacked: ``A`` is ``(k, d, r)``; ``B`` is ``(r, d)``
    when shared by all units and ``(k, r, d)`` otherwise; ``b`` is ``(k, d)``
    or ``None``.
    """

    def __init__(self, A, B, b=None, kind="L2"):
        self.kind = RescaleKind.parse(kind)
        self.A = _param(A)
        self.B = _param(B)
        self.b = None if b is None else _param(b)
        if self.A.ndim != 3:
            raise DimensionError(f"A must be (k, d, r), got {self.A.shape}")
        k, d, r = self.A.shape
        if r > d:
            raise ContractError(f"rank {r} exceeds input dimension {d}")
        if self.B.shape not in ((r, d), (k, r, d)):
            raise DimensionError(f"B must be {(r, d)} (shared) or {(k, r, d)}, got {self.B.shape}")
        if self.kind is RescaleKind.WB and self.b is not None:
            raise ContractError("WB banks have no bias term")
        if self.b is not None and self.b.shape != (k, d):
            raise DimensionError(f"bias must be {(k, d)}, got {self.b.shape}")

    @classmethod
    def init(cls, k: int, d: int, rank: int, kind="L2", shared_b: bool | None = None, rng=None):
        """Uniform init in ``[-1/sqrt(d), 1/sqrt(d)]``; B is shared by default except for WB."""
        rng = np.random.default_rng(rng)
        kind = RescaleKind.parse(kind)
        if shared_b is None:
            shared_b = kind is not RescaleKind.WB
        lim = 1.0 / np.sqrt(d)
        A = rng.uniform(-lim, lim, size=(k, d, rank))
        B = rng.uniform(-lim, lim, size=(rank, d) if shared_b else (k, rank, d))
        b = None if kind is RescaleKind.WB else np.zeros((k, d))
        return cls(A, B, b, kind)

    @classmethod
    def from_units(cls, units, shared_b_matrix=None) -> "DauBank":
        kinds = {u.kind for u in units}
        if len(kinds) != 1:
            raise ContractError(f"units mix rescalers {sorted(k.value for k in kinds)}")
        dims = {(u.d, u.rank) for u in units}
        if len(dims) != 1:
            raise ContractError(f"units disagree on (d, r): {sorted(dims)}")
        A = np.stack([u.A.data for u in units])
        if shared_b_matrix is not None:
            B = np.asarray(getattr(shared_b_matrix, "data", shared_b_matrix))
        else:
            B = np.stack([u.B.data for u in units])
        b = None if units[0].b is None else np.stack([u.b.data for u in units])
        return cls(A, B, b, units[0].kind)

    # -- shape info -----------------------------------------------------------
    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def rank(self) -> int:
        return self.A.shape[2]

    @property
    def shared_b(self) -> bool:
        return self.B.ndim == 2

    def parameters(self) -> list:
        return [p for p in (self.A, self.B, self.b) if p is not None]

    def named_parameters(self) -> dict:
        out = {"A": self.A, "B": self.B}
        if self.b is not None:
            out["b"] = self.b
        return out

    def unit(self, j: int) -> DauParams:
        """A detached copy of unit ``j``."""
        B = self.B.data if self.shared_b else self.B.data[j]
        b = None if self.b is None else self.b.data[j].copy()
        return DauParams(self.A.data[j].copy(), B.copy(), b, self.kind)

    def units(self) -> list:
        return [self.unit(j) for j in range(self.k)]

    def copy(self) -> "DauBank":
        return DauBank(
            self.A.data.copy(),
            self.B.data.copy(),
            None if self.b is None else self.b.data.copy(),
            self.kind,
        )

    # -- evaluation -------------------------------------------------------------
    def _project(self, X: Tensor) -> Tensor:
        """``B x`` for every column, shaped ``(..., k or 1, r, P)``."""
        k, d, r = self.A.shape
        if self.shared_b:
            Z = tn.matmul(self.B, X)
            return Z.reshape(*Z.shape[:-2], 1, r, Z.shape[-1])
        Z = tn.matmul(self.B.reshape(k * r, d), X)
        return Z.reshape(*Z.shape[:-2], k, r, Z.shape[-1])

    def _pre_rescale(self, X: Tensor) -> Tensor:
        """``A B x + b`` for L2/SQ banks, shaped ``(..., k, d, P)``."""
        k, d, r = self.A.shape
        Z = self._project(X)
        if self.shared_b:
            Z = Z.reshape(*Z.shape[:-3], r, Z.shape[-1])
            U = tn.matmul(self.A.reshape(k * d, r), Z)
            U = U.reshape(*U.shape[:-2], k, d, U.shape[-1])
        else:
            U = tn.matmul(self.A, Z)
        if self.b is not None:
            U = U + self.b.reshape(k, d, 1)
        return U

    def _bounded_projections(self, X: Tensor):
        """WB factors: ``B x`` and ``A'^T x`` per unit, both ``(..., k, r, P)``."""
        k, d, r = self.A.shape
        fro = tn.frobenius_norm(self.A, axes=(1, 2), keepdims=True)
        a_prime = tn.div(self.A, fro, eps=tn.get_eps())
        At = tn.transpose(a_prime, (0, 2, 1)).reshape(k * r, d)
        Y = tn.matmul(At, X)
        return self._project(X), Y.reshape(*Y.shape[:-2], k, r, Y.shape[-1])

    def forward_columns(self, X, frozen: bool = False) -> Tensor:
        """Apply every unit to every column of ``X`` (``(..., d, P)`` -> ``(..., k, P)``).

        With ``frozen=True`` the dynamic weights are detached from the graph,
        so gradients see the layer as the fixed linear map ``W(x)``.
        """
        X = tn.as_tensor(X)
        if X.ndim < 2 or X.shape[-2] != self.d:
            raise DimensionError(f"columns of shape {X.shape} do not match unit dimension {self.d}")
        k, d, r = self.A.shape
        if self.kind is RescaleKind.WB:
            Z, Y = self._bounded_projections(X)
            if not frozen:
                return tn.rescaled_inner(Z, Y, "l2")
            V = rescale_l2(Z, axis=-2).detach()
            return (V * Y).sum(axis=-2)
        U = self._pre_rescale(X)
        Xe = X.reshape(*X.shape[:-2], 1, d, X.shape[-1])
        if not frozen:
            return tn.rescaled_inner(U, Xe, self.kind.value.lower())
        W = _RESCALERS[self.kind](U, axis=-2).detach()
        return (W * Xe).sum(axis=-2)

    def materialize(self, X) -> np.ndarray:
        """Explicit dynamic weights ``(..., k, d, P)`` for columns ``X``."""
        X = tn.as_tensor(X)
        with tn.no_grad():
            if self.kind is RescaleKind.WB:
                eps = tn.get_eps()
                A = self.A.data
                fro = np.maximum(np.sqrt((A * A).sum(axis=(1, 2), keepdims=True)), eps)
                Z = self._project(X).data
                V = Z / np.maximum(np.sqrt((Z * Z).sum(axis=-2, keepdims=True)), eps)
                return np.matmul(A / fro, V)
            return _RESCALERS[self.kind](self._pre_rescale(X), axis=-2).data

    def __call__(self, x, frozen: bool = False) -> Tensor:
        """Outputs of all units on one vector (``(d,) -> (k,)``) or a batch (``(n, d) -> (n, k)``)."""
        x = tn.as_tensor(x)
        if x.ndim == 1:
            return self.forward_columns(x.reshape(self.d, 1), frozen).reshape(self.k)
        return tn.swap_last(self.forward_columns(tn.swap_last(x), frozen))


def align_fit(bank: DauBank, samples, steps: int, lr: float, log_every: int = 0) -> DauBank:
    """Maximise the mean unit output over ``samples`` by plain gradient ascent.

    Returns a fitted copy; ``bank`` itself is left untouched.
    """
    X = np.asarray(samples, dtype=tn.get_dtype())
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("align_fit needs a non-empty (n, d) sample matrix")
    if X.shape[1] != bank.d:
        raise DimensionError(f"samples have dimension {X.shape[1]}, bank expects {bank.d}")
    fitted = bank.copy()
    cols = Tensor(np.ascontiguousarray(X.T))
    params = fitted.parameters()
    for step in range(steps):
        for p in params:
            p.zero_grad()
        objective = fitted.forward_columns(cols).mean()
        objective.backward()
        for p in params:
            p.data = p.data + lr * p.grad
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  mean output {objective.item():.6f}")
    return fitted


def top_right_singular_vectors(bank: DauBank, j: int = 0, count: int | None = None) -> np.ndarray:
    """Leading right singular vectors of ``A_j B_j`` as rows (``(count, d)``)."""
    unit = bank.unit(j)
    M = unit.A.data @ unit.B.data
    _, _, vt = np.linalg.svd(M, full_matrices=False)
    return vt[: count or unit.rank]


def subspace_cosines(templates, basis) -> np.ndarray:
    """Cosine between each template and its orthogonal projection onto ``span(basis)``."""
    T = np.asarray(templates, dtype=np.float64).reshape(len(templates), -1)
    Q, _ = np.linalg.qr(np.asarray(basis, dtype=np.float64).T)
    proj = (T @ Q) @ Q.T
    num = (proj * T).sum(axis=1)
    den = np.linalg.norm(proj, axis=1) * np.linalg.norm(T, axis=1)
    return num / np.where(den > 0, den, 1.0)

