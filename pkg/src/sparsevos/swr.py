"""Object-aware sparse window routing for the final encoder stage.

The router reads the previous frame's decoder output: windows touched by any
of the three (dilated) candidate masks are object windows, and when the
presence score is not confident the windows carrying the top cumulative share
of decoder cross-attention are added. Every other window bypasses its
transformer block through a residual bottleneck (:func:`shortcut_forward`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .layers import layernorm_backward, linear
from .numerics import layernorm, relu
from .windows import WindowLayout

if TYPE_CHECKING:
    from .decoder import MaskPrediction


class ConfigError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    theta_obj: float = 5.0
    tau: float = 0.7
    dilation_radius: int = 1
    dilation_iterations: int = 1

    def __post_init__(self) -> None:
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if not math.isfinite(self.theta_obj):
            raise ConfigError("theta_obj must be finite")
        if self.dilation_radius < 0 or self.dilation_iterations < 0:
            raise ConfigError("dilation radius and iterations must be >= 0")


@dataclass(frozen=True)
class RoutingDecision:
    t: int
    n_windows: int
    w_pred: frozenset[int] = field(default_factory=frozenset)
    w_salient: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        bad = [i for i in self.w_pred | self.w_salient if not 0 <= i < self.n_windows]
        if bad:
            raise RoutingError(f"window indices {bad} outside [0, {self.n_windows})")

    @property
    def w_obj(self) -> frozenset[int]:
        return self.w_pred | self.w_salient

    @property
    def object_windows(self) -> list[int]:
        return sorted(self.w_obj)

    @property
    def background_windows(self) -> list[int]:
        obj = self.w_obj
        return [i for i in range(self.n_windows) if i not in obj]

    @property
    def window_sparsity(self) -> float:
        return 1.0 - len(self.w_obj) / self.n_windows

    @classmethod
    def dense(cls, t: int, n_windows: int) -> "RoutingDecision":
        return cls(t, n_windows, w_pred=frozenset(range(n_windows)))


def dilate(mask: np.ndarray, radius: int, iterations: int = 1) -> np.ndarray:
    """Binary dilation by a ``(2r+1) x (2r+1)`` square, repeated."""
    out = np.asarray(mask, dtype=bool)
    if radius == 0:
        return out.copy()
    H, W = out.shape
    for _ in range(iterations):
        padded = np.zeros((H + 2 * radius, W + 2 * radius), dtype=bool)
        padded[radius : radius + H, radius : radius + W] = out
        grown = np.zeros_like(out)
        for dy in range(2 * radius + 1):
            for dx in range(2 * radius + 1):
                grown |= padded[dy : dy + H, dx : dx + W]
        out = grown
    return out


def windows_from_masks(masks: np.ndarray, layout: WindowLayout, cfg: RouterConfig = RouterConfig()) -> frozenset[int]:
    """Windows containing at least one pixel of the dilated union of masks.

    ``masks`` is ``(n, H', W')`` where ``H'``/``W'`` are integer multiples of
    the layout's feature extents; dilation happens at mask resolution.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    union = masks.any(axis=0)
    Hm, Wm = union.shape
    if Hm % layout.H or Wm % layout.W or Hm // layout.H != Wm // layout.W:
        raise RoutingError(f"mask extents {union.shape} are not a multiple of {(layout.H, layout.W)}")
    scale = Hm // layout.H
    grown = dilate(union, cfg.dilation_radius, cfg.dilation_iterations)
    ys, xs = np.nonzero(grown)
    if ys.size == 0:
        return frozenset()
    return frozenset(int(i) for i in np.unique(layout.window_index(ys // scale, xs // scale)))


def window_scores(attn: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """Per-window attention mass, renormalising ``attn`` to sum to one."""
    a = np.asarray(attn, dtype=np.float64)
    if np.any(a < 0):
        raise RoutingError("attention map has negative entries")
    total = a.sum()
    if total <= 0:
        a = np.full_like(a, 1.0 / a.size)
    elif abs(total - 1.0) > 1e-6:
        a = a / total
    return layout.window_sums(a)


def cumulative_selection(alpha: Sequence[float], tau: float) -> frozenset[int]:
    """Windows whose descending-order prefix mass (ending at them) is <= tau.

    Equal scores are ordered by index, so among ties the lower index enters
    the prefix first.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    order = np.argsort(-alpha, kind="stable")
    prefix = np.cumsum(alpha[order])
    return frozenset(int(i) for i, c in zip(order, prefix) if c <= tau)


def salient_windows(attn: np.ndarray, s_obj: float, layout: WindowLayout, cfg: RouterConfig = RouterConfig()) -> frozenset[int]:
    if s_obj >= cfg.theta_obj:
        return frozenset()
    return cumulative_selection(window_scores(attn, layout), cfg.tau)


def route(
    prev: "MaskPrediction | None",
    layout: WindowLayout,
    cfg: RouterConfig = RouterConfig(),
    t: int = 0,
    attention: np.ndarray | None = None,
) -> RoutingDecision:
    """Routing plan for frame ``t`` from the frame ``t-1`` decoder output.

    With neither a prediction nor an attention map (cold start) every window
    is an object window. A missing prediction with an attention map counts as
    minimal confidence, so the saliency set is always consulted.
    """
    if prev is None and attention is None:
        return RoutingDecision.dense(t, layout.n_windows)
    if prev is None:
        return RoutingDecision(t, layout.n_windows, w_salient=salient_windows(attention, -math.inf, layout, cfg))
    w_pred = windows_from_masks(prev.masks, layout, cfg)
    attn = prev.attention if attention is None else attention
    w_sal = salient_windows(attn, prev.s_obj, layout, cfg)
    return RoutingDecision(t, layout.n_windows, w_pred=w_pred, w_salient=w_sal)


# -- shortcut branch ---------------------------------------------------------------


@dataclass
class ShortcutWeights:
    """``X + W_up ReLU(W_down LayerNorm(X))`` with bias-free projections."""

    w_down: np.ndarray  # (d/2, d)
    w_up: np.ndarray  # (d, d/2)
    gamma: np.ndarray  # (d,)
    beta: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.gamma.shape[0]

    def param_count(self) -> int:
        return sum(a.size for a in (self.w_down, self.w_up, self.gamma, self.beta))

    def copy(self) -> "ShortcutWeights":
        return ShortcutWeights(self.w_down.copy(), self.w_up.copy(), self.gamma.copy(), self.beta.copy())

    def to_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.down": self.w_down,
            f"{prefix}.up": self.w_up,
            f"{prefix}.ln.g": self.gamma,
            f"{prefix}.ln.b": self.beta,
        }

    @classmethod
    def from_dict(cls, w, prefix: str) -> "ShortcutWeights":
        return cls(w[f"{prefix}.down"], w[f"{prefix}.up"], w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"])

    @classmethod
    def identity(cls, d: int, rng=None, std: float | None = None) -> "ShortcutWeights":
        """Zero up-projection (exact identity) with a random down-projection."""
        if d % 2:
            raise ConfigError(f"shortcut width must be even, got d={d}")
        dr = d // 2
        if rng is None:
            down = np.zeros((dr, d), dtype=np.float32)
        else:
            down = rng.normal((dr, d), std if std is not None else 1.0 / math.sqrt(d))
        return cls(
            down,
            np.zeros((d, dr), dtype=np.float32),
            np.ones(d, dtype=np.float32),
            np.zeros(d, dtype=np.float32),
        )


def shortcut_forward(x: np.ndarray, w: ShortcutWeights, cache: dict | None = None) -> np.ndarray:
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"shortcut width must be even, got d={d}")
    if w.w_down.shape != (d // 2, d) or w.w_up.shape != (d, d // 2):
        raise ConfigError(f"shortcut weights do not match width {d}")
    n = layernorm(x, w.gamma, w.beta)
    h = linear(n, w.w_down)
    r = relu(h)
    y = x + linear(r, w.w_up)
    if cache is not None:
        cache.update(x=x, n=n, h=h, r=r)
    return y


def shortcut_backward(dy: np.ndarray, w: ShortcutWeights, cache: dict) -> tuple[ShortcutWeights, np.ndarray]:
    """Parameter gradients (as a ShortcutWeights) and the input gradient."""
    x, n, h, r = cache["x"], cache["n"], cache["h"], cache["r"]
    d = x.shape[-1]
    dy2 = dy.reshape(-1, d)
    r2 = r.reshape(-1, d // 2)
    n2 = n.reshape(-1, d)
    d_up = dy2.T @ r2
    dr = dy2 @ w.w_up
    dh = dr * (h.reshape(-1, d // 2) > 0)
    d_down = dh.T @ n2
    dn = (dh @ w.w_down).reshape(x.shape)
    dxn, dgamma, dbeta = layernorm_backward(dn, x, w.gamma)
    grads = ShortcutWeights(d_down, d_up, dgamma, dbeta)
    return grads, dy + dxn


def param_count(d: int) -> int:
    """Shortcut parameters for width d: ``d^2 + 2d``."""
    if d % 2:
        raise ConfigError(f"shortcut width must be even, got d={d}")
    return d * d + 2 * d


ROUTING_COLUMNS = ("frame", "n_windows", "n_pred", "n_salient", "n_obj", "sparsity")


def routing_row(dec: RoutingDecision) -> dict:
    return {
        "frame": dec.t,
        "n_windows": dec.n_windows,
        "n_pred": len(dec.w_pred),
        "n_salient": len(dec.w_salient),
        "n_obj": len(dec.w_obj),
        "sparsity": f"{dec.window_sparsity:.6f}",
    }


def write_routing_csv(path, decisions: Iterable[RoutingDecision]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUTING_COLUMNS)
        writer.writeheader()
        for dec in decisions:
            writer.writerow(routing_row(dec))
