"""Stage-adaptive convolution over a rolling window of hidden states.

Each window position is weighted by a softmax over the running total of
stage variation, so positions separated from the present by a lot of
accumulated change count less. A full-width convolution (kernel length equal
to the window) turns the weighted window into one value per kernel, and a
squeeze/excite bottleneck driven by the weighted mean hidden state rescales
those values channel by channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Param, Value


@dataclass
class StageWindow:
    """The last ``K`` hidden states and normalised stage variations.

    ``hidden[k]`` is ``(B, N_h)`` and ``stage[k]`` is ``(B, 1)``; index 0 is
    the oldest position. Unfilled positions hold exact zeros.
    """

    hidden: list[Value]
    stage: list[Value]

    @classmethod
    def empty(cls, batch: int, hidden: int, size: int) -> StageWindow:
        if size < 1:
            raise ValueError(f"window size must be >= 1, got {size}")
        return cls([ad.constant(np.zeros((batch, hidden))) for _ in range(size)],
                   [ad.constant(np.zeros((batch, 1))) for _ in range(size)])

    @classmethod
    def from_arrays(cls, H, S) -> StageWindow:
        """Build from ``H`` of shape ``(K, N_h)`` or ``(B, K, N_h)`` and matching ``S``."""
        H = np.asarray(H, dtype=float)
        S = np.asarray(S, dtype=float)
        if H.ndim == 2:
            H, S = H[None], S[None]
        if H.shape[:2] != S.shape[:2]:
            raise DimensionError(f"window hidden {H.shape} and stage {S.shape} disagree")
        return cls([ad.constant(H[:, k]) for k in range(H.shape[1])],
                   [ad.constant(S[:, k:k + 1]) for k in range(H.shape[1])])

    @property
    def size(self) -> int:
        return len(self.hidden)

    def push(self, h: Value, s_norm: Value) -> StageWindow:
        return StageWindow(self.hidden[1:] + [h], self.stage[1:] + [s_norm])

    def stage_vector(self) -> Value:
        return ad.concat(self.stage)

    def H(self) -> np.ndarray:
        """Window contents as a ``(B, K, N_h)`` array."""
        return np.stack([h.data for h in self.hidden], axis=1)


@dataclass
class StageConvParams:
    """Convolution kernels and the excitation bottleneck.

    ``kernel`` is stored flattened as ``(K * N_h, N_m)`` so that
    ``kernel[k * N_h + j, i]`` is tap ``k`` of channel ``j`` in kernel ``i``.
    ``W_x2`` (squeeze, ``(N_m, N_x)``) and ``W_x1`` (excite, ``(N_x, N_m)``)
    are stored for right-multiplication of row vectors.
    """

    kernel: Param
    W_x1: Param
    W_x2: Param
    window: int
    hidden: int

    @property
    def n_kernels(self) -> int:
        return self.kernel.shape[1]

    def kernel_tensor(self) -> np.ndarray:
        """Kernels as ``M[i, j, k]`` (kernel, channel, tap)."""
        k, h = self.window, self.hidden
        return self.kernel.data.reshape(k, h, -1).transpose(2, 1, 0)

    @property
    def weights(self) -> dict[str, Param]:
        return {"conv_kernel": self.kernel, "W_x1": self.W_x1, "W_x2": self.W_x2}


def bottleneck_size(n_kernels: int) -> int:
    return max(1, n_kernels // 2)


def init_conv_params(hidden: int, window: int, rng: np.random.Generator,
                     n_bottleneck: int | None = None) -> StageConvParams:
    # residual head needs as many kernels as hidden units
    n_kernels = hidden
    n_x = bottleneck_size(n_kernels) if n_bottleneck is None else n_bottleneck
    if not 1 <= n_x < n_kernels:
        raise ValueError(f"bottleneck size must be in [1, {n_kernels}), got {n_x}")
    fan_conv = window * hidden
    kernel = rng.uniform(-1, 1, size=(fan_conv, n_kernels)) / np.sqrt(fan_conv)
    w_x2 = rng.uniform(-1, 1, size=(n_kernels, n_x)) / np.sqrt(n_kernels)
    w_x1 = rng.uniform(-1, 1, size=(n_x, n_kernels)) / np.sqrt(n_x)
    return StageConvParams(Param(kernel, "conv_kernel"), Param(w_x1, "W_x1"),
                           Param(w_x2, "W_x2"), window, hidden)


def stage_weights(S) -> Value:
    """Softmax over the running sum of window stage variations, oldest first."""
    S = S if isinstance(S, Value) else ad.constant(np.atleast_2d(np.asarray(S, float)))
    return ad.softmax(ad.cumsum(S, "forward"))


def _weighted_rows(window: StageWindow, weights: Value) -> list[Value]:
    if weights.shape[-1] != window.size:
        raise DimensionError(
            f"stage weights have {weights.shape[-1]} entries for a window of {window.size}")
    return [window.hidden[k] * ad.slice_last(weights, k, k + 1) for k in range(window.size)]


def stage_conv(window: StageWindow, weights: Value, kernel: Value,
               weighted: list[Value] | None = None) -> Value:
    """``u[i] = sum_j sum_k M[i, j, k] * H[k, j] * weights[k]`` for every kernel ``i``."""
    weighted = _weighted_rows(window, weights) if weighted is None else weighted
    flat = ad.concat(weighted)
    if flat.shape[-1] != kernel.shape[0]:
        raise DimensionError(
            f"window of {window.size} x {window.hidden[0].shape[-1]} does not match "
            f"kernel of shape {kernel.shape}")
    return flat @ kernel


def progression_theme(window: StageWindow, weights: Value,
                      weighted: list[Value] | None = None) -> Value:
    """Stage-weighted window average ``(1/K) * sum_k weights[k] * H[k]``."""
    weighted = _weighted_rows(window, weights) if weighted is None else weighted
    acc = weighted[0]
    for w in weighted[1:]:
        acc = acc + w
    return ad.scale(acc, 1.0 / window.size)


def recalibrate(u: Value, z: Value, W_x1: Value, W_x2: Value) -> tuple[Value, Value]:
    """Return ``(u * x, x)`` with ``x = sigmoid(relu(z W_x2) W_x1)`` in (0, 1)."""
    if z.shape[-1] != W_x2.shape[0] or W_x1.shape[-1] != u.shape[-1]:
        raise DimensionError(
            f"recalibrate: z {z.shape}, W_x2 {W_x2.shape}, W_x1 {W_x1.shape}, u {u.shape}")
    x = ad.sigmoid(ad.relu(z @ W_x2) @ W_x1)
    return u * x, x


def stage_module(window: StageWindow, params: StageConvParams):
    """Full module on one window: returns ``(u_tilde, u, z, x, weights)``."""
    weights = stage_weights(window.stage_vector())
    weighted = _weighted_rows(window, weights)
    u = stage_conv(window, weights, params.kernel, weighted)
    z = progression_theme(window, weights, weighted)
    u_tilde, x = recalibrate(u, z, params.W_x1, params.W_x2)
    return u_tilde, u, z, x, weights
