"""Model-inherent linear decompositions and baseline attributions.

Every stage of a :class:`~codanets.net.CodaNet` after the encoding is dynamic
linear, so the pooled class evidence is ``W(a_t) a_t`` for the activation at
any depth ``t``.  The row ``[W(a_t)]_j`` is obtained as the gradient of the
pooled output ``j`` with every dynamic weight detached; multiplying it with
``a_t`` gives contributions that sum exactly to ``T (logit_j - b0_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .dau import DauBank, RescaleKind
from .errors import ContractError
from .net import CodaConvLayer, CodaNet, PatchEmbedding, StemBlock
from .tensor import Tensor


@dataclass
class LinearDecomposition:
    class_index: int
    depth: int
    weight_row: np.ndarray
    contributions: np.ndarray
    bias_part: float
    temperature: float
    logit: float

    @property
    def reconstructed_logit(self) -> float:
        return float(self.contributions.sum() / self.temperature + self.bias_part)

    @property
    def relative_error(self) -> float:
        return abs(self.reconstructed_logit - self.logit) / max(abs(self.logit), 1e-12)

    def spatial(self) -> "SpatialContributionMap":
        return SpatialContributionMap(self.contributions.sum(axis=0))


@dataclass
class SpatialContributionMap:
    """Signed per-position contributions, summed over channels."""

    values: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return np.maximum(self.values, 0.0)

    @property
    def negative(self) -> np.ndarray:
        return np.minimum(self.values, 0.0)

    def total(self) -> float:
        return float(self.values.sum())


def _check_depth_class(net: CodaNet, class_j, depth: int) -> None:
    if not 0 <= depth < net.num_depths:
        raise ContractError(f"depth {depth} outside [0, {net.num_depths - 1}]")
    classes = np.atleast_1d(class_j)
    if ((classes < 0) | (classes >= net.num_classes)).any():
        raise ContractError(f"class index {class_j} outside [0, {net.num_classes - 1}]")


def _check_space(net: CodaNet, space: str) -> None:
    if space not in ("input", "pixel"):
        raise ContractError(f"unknown space {space!r}; expected 'input' or 'pixel'")
    if space == "pixel" and isinstance(net.encoding, PatchEmbedding):
        raise ContractError(
            "contributions of a learnt embedding cannot be assigned to pixels; report them in embedding space")


def frozen_rows(net: CodaNet, activation, classes, depth: int) -> np.ndarray:
    """``[W_{t->L}(a_t)]_{j_n}`` for a batch of activations, one class per sample."""
    a = Tensor(np.asarray(activation), requires_grad=True)
    classes = np.asarray(classes).reshape(-1)
    pooled = net.pooled_from(a, depth, frozen=True)
    pooled[np.arange(len(classes)), classes].sum().backward()
    return a.grad


def effective_row(net: CodaNet, image, class_j: int, depth: int = 0, space: str = "input") -> LinearDecomposition:
    """Exact decomposition of ``logit_j`` with respect to the activation at ``depth``."""
    _check_depth_class(net, class_j, depth)
    _check_space(net, space)
    net.eval()
    acts = net.activations(image)
    a = acts[depth]
    if a.shape[0] != 1:
        raise ContractError("effective_row takes a single image; use batch_contributions for batches")
    row = frozen_rows(net, a, [class_j], depth)
    with tn.no_grad():
        logit = float(net.logits_from(a, depth).data[0, class_j])
    return LinearDecomposition(
        class_index=int(class_j), depth=depth, weight_row=row[0], contributions=(row * a)[0],
        bias_part=float(net.output_bias[class_j]), temperature=net.temperature, logit=logit)


def batch_contributions(net: CodaNet, images, classes, depth: int = 0, batch_size: int = 64) -> np.ndarray:
    """Contributions ``row * a_t`` for many images, shape ``(N, C_t, H_t, W_t)``."""
    classes = np.asarray(classes).reshape(-1)
    _check_depth_class(net, classes, depth)
    images = np.asarray(images)
    net.eval()
    out = []
    for s in range(0, len(images), batch_size):
        a = net.activations(images[s:s + batch_size])[depth]
        out.append(frozen_rows(net, a, classes[s:s + batch_size], depth) * a)
    return np.concatenate(out, axis=0)


def spatial_map(decomposition: LinearDecomposition) -> SpatialContributionMap:
    return decomposition.spatial()


def single_layer_contrib(bank: DauBank, x, class_j: int) -> np.ndarray:
    """``w_j(x) * x`` for a bank used directly as a classifier on vectors."""
    x = np.asarray(x, dtype=tn.get_dtype())
    w = bank.materialize(x.reshape(bank.d, 1))[class_j, :, 0]
    return w * x


# -- baselines ---------------------------------------------------------------------------------------
def _logit_gradient(net: CodaNet, a0: np.ndarray, class_j: int, frozen: bool) -> np.ndarray:
    a = Tensor(a0, requires_grad=True)
    logits = net.logits_from(a, 0, frozen=frozen)
    logits[:, class_j].sum().backward()
    return a.grad


def occlusion_maps(net: CodaNet, a0: np.ndarray, size: int, stride: int, batch_size: int = 64) -> np.ndarray:
    """Occlusion maps ``(k, H, W)`` for every class from one pass over the zeroed patches."""
    _, c, h, w = a0.shape
    with tn.no_grad():
        base = net.logits_from(a0, 0).data[0]
    tops = range(0, max(h - size, 0) + 1, stride)
    lefts = range(0, max(w - size, 0) + 1, stride)
    corners = [(i, j) for i in tops for j in lefts]
    total = np.zeros((net.num_classes, h, w))
    count = np.zeros((h, w))
    for s in range(0, len(corners), batch_size):
        chunk = corners[s:s + batch_size]
        batch = np.repeat(a0, len(chunk), axis=0)
        for n, (i, j) in enumerate(chunk):
            batch[n, :, i:i + size, j:j + size] = 0.0
        with tn.no_grad():
            drops = base - net.logits_from(batch, 0).data
        for drop, (i, j) in zip(drops, chunk):
            total[:, i:i + size, j:j + size] += drop[:, None, None]
            count[i:i + size, j:j + size] += 1
    return total / np.maximum(count, 1)


def occlusion_map(net: CodaNet, a0: np.ndarray, class_j: int, size: int, stride: int,
                  batch_size: int = 64) -> np.ndarray:
    """Mean logit drop over all ``size x size`` zero patches covering each position."""
    return occlusion_maps(net, a0, size, stride, batch_size)[class_j]


def baseline_attributions(net: CodaNet, image, class_j: int, method: str = "ixg", occlusion_size: int = 4,
                          occlusion_stride: int = 2, frozen: bool = False) -> SpatialContributionMap:
    """Post-hoc attributions in model-input space (the encoded image), summed over channels.

    ``grad`` is the gradient of ``logit_j``; ``ixg`` multiplies it with the
    input; ``occlusion`` records the logit drop when patches are zeroed.
    Gradients of the logit carry the ``1/T`` factor, so for a net with
    input-independent weights ``ixg`` equals the inherent contributions divided
    by ``T``.
    """
    _check_depth_class(net, class_j, 0)
    net.eval()
    a0 = net.activations(image)[0]
    method = method.lower()
    if method == "grad":
        values = _logit_gradient(net, a0, class_j, frozen)[0].sum(axis=0)
    elif method == "ixg":
        values = (a0 * _logit_gradient(net, a0, class_j, frozen))[0].sum(axis=0)
    elif method.startswith("occ"):
        if occlusion_size < 1 or occlusion_stride < 1:
            raise ContractError("occlusion patch size and stride must be >= 1")
        values = occlusion_map(net, a0, class_j, occlusion_size, occlusion_stride)
    else:
        raise ContractError(f"unknown attribution method {method!r}")
    return SpatialContributionMap(np.asarray(values, dtype=np.float64))


# -- explicit matrices (test oracles) -----------------------------------------------------------------
def _patch_index(in_shape, kernel, stride, padding):
    """For each output position, the flat input indices of its patch (-1 for padding)."""
    c, h, w = in_shape
    kh, kw = kernel
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    index = np.full((oh * ow, c * kh * kw), -1, dtype=np.int64)
    for oi in range(oh):
        for oj in range(ow):
            t = oi * ow + oj
            col = 0
            for ch in range(c):
                for di in range(kh):
                    for dj in range(kw):
                        ii = oi * stride + di - padding
                        jj = oj * stride + dj - padding
                        if 0 <= ii < h and 0 <= jj < w:
                            index[t, col] = (ch * h + ii) * w + jj
                        col += 1
    return index, (oh, ow)


def layer_matrix(stage, a: np.ndarray) -> np.ndarray:
    """The explicit matrix ``W_l(a)`` with ``vec(stage(a)) = W_l(a) vec(a)``.

    ``a`` is a single activation ``(C, H, W)``.  Rows are assembled one output
    position at a time from per-patch unit weights evaluated directly.
    """
    a = np.asarray(a, dtype=np.float64)
    index, (oh, ow) = _patch_index(a.shape, stage.kernel, stage.stride, stage.padding)
    flat = a.reshape(-1)
    k = stage.out_channels
    M = np.zeros((k * oh * ow, flat.size))
    if isinstance(stage, StemBlock):
        weight = stage.weight.data
    for t in range(oh * ow):
        valid = index[t] >= 0
        patch = np.where(valid, flat[np.maximum(index[t], 0)], 0.0)
        if isinstance(stage, CodaConvLayer):
            weights = np.stack([_unit_weight(stage.bank.unit(c), patch) for c in range(k)])
        else:
            pre = weight @ patch
            weights = weight * (pre > 0)[:, None]
        for c in range(k):
            np.add.at(M[c * oh * ow + t], index[t][valid], weights[c][valid])
    return M


def _unit_weight(unit, x: np.ndarray) -> np.ndarray:
    A, B = unit.A.data, unit.B.data
    eps = tn.get_eps()
    if unit.kind is RescaleKind.WB:
        bx = B @ x
        return A @ bx / max(np.linalg.norm(A), eps) / max(np.linalg.norm(bx), eps)
    u = A @ (B @ x)
    if unit.b is not None:
        u = u + unit.b.data
    n = np.linalg.norm(u)
    w = u / max(n, eps)
    if unit.kind is RescaleKind.SQ:
        w = w * n * n / (1.0 + n * n)
    return w


def explicit_global_matrix(net: CodaNet, image, depth: int = 0) -> np.ndarray:
    """``P W_L ... W_{t+1}``: pooled class evidence as an explicit matrix over ``vec(a_t)``."""
    acts = net.activations(image)
    M = None
    for stage, a in zip(net.stages[depth:], acts[depth:-1]):
        W = layer_matrix(stage, a[0])
        M = W if M is None else W @ M
    k, hw = net.num_classes, acts[-1][0, 0].size
    pool = np.kron(np.eye(k), np.ones((1, hw)))
    if M is None:
        return pool
    return pool @ M
