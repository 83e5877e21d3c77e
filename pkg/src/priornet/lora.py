"""Low-rank residual adapters on frozen query/key/value projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .numerics import ShapeError, matmul

if TYPE_CHECKING:
    from .backbone import EncoderConfig, PriorNetModel

PROJECTIONS = ("q", "k", "v")


@dataclass
class LoraAdapter:
    A: np.ndarray  # d x r
    B: np.ndarray  # r x d
    alpha: float

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size


def init_adapter(d: int, r: int, alpha: float | None = None, seed: int = 0,
                 std: float = 0.02) -> LoraAdapter:
    """A ~ N(0, std^2), B = 0, so the residual branch starts at exactly zero."""
    if not (1 <= r <= d):
        raise ValueError(f"rank must satisfy 1 <= r <= d, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, std, size=(d, r))
    B = np.zeros((r, d))
    return LoraAdapter(A=A, B=B, alpha=float(r if alpha is None else alpha))


def delta_weight(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * matmul(adapter.A, adapter.B)


def apply_adapted_projection(X: np.ndarray, W: np.ndarray,
                             adapter: LoraAdapter | None = None) -> np.ndarray:
    """X (W + dW) evaluated as X W + scale (X A) B, without forming dW."""
    if X.shape[-1] != W.shape[0]:
        raise ShapeError(f"cannot project {X.shape} with weight {W.shape}")
    out = X @ W
    if adapter is not None:
        if adapter.A.shape[0] != W.shape[0] or adapter.B.shape[1] != W.shape[1]:
            raise ShapeError("adapter factors do not match the frozen weight")
        out = out + adapter.scale * ((X @ adapter.A) @ adapter.B)
    return out


def merge_adapter(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    if W.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise ShapeError(f"weight {W.shape} does not match adapter {adapter.A.shape} x {adapter.B.shape}")
    return W + delta_weight(adapter)


@dataclass
class PlacementPolicy:
    """Which attention blocks receive adapters: ``every_other``, ``all`` or ``explicit``."""

    mode: str = "every_other"
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("every_other", "all", "explicit"):
            raise ValueError(f"unknown placement mode {self.mode!r}")
        self.indices = [int(i) for i in self.indices]

    def adapted_layer_indices(self, num_blocks: int) -> list[int]:
        if self.mode == "every_other":
            return list(range(0, num_blocks, 2))
        if self.mode == "all":
            return list(range(num_blocks))
        bad = [i for i in self.indices if not 0 <= i < num_blocks]
        if bad:
            raise IndexError(f"block indices {bad} out of range [0, {num_blocks})")
        return sorted(set(self.indices))

    @classmethod
    def none(cls) -> "PlacementPolicy":
        return cls(mode="explicit", indices=[])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "indices": list(self.indices)}


def place_adapters(model: "PriorNetModel", policy: PlacementPolicy, rank: int = 4,
                   alpha: float | None = None, seed: int = 0) -> "PriorNetModel":
    """Attach zero-output Q/K/V adapters to the blocks selected by ``policy``.

    Any adapters already on the model are replaced.  Each adapter draws A from
    its own seed derived from (seed, block, projection).
    """
    cfg = model.cfg
    blocks = policy.adapted_layer_indices(cfg.num_blocks)
    model.adapters = {}
    for i in blocks:
        for j, proj in enumerate(PROJECTIONS):
            sub = int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])
            model.adapters[(i, proj)] = init_adapter(cfg.d, rank, alpha, seed=sub)
    model.policy = policy
    return model


def adapter_param_count(adapters: Iterable[LoraAdapter]) -> int:
    return sum(a.num_params for a in adapters)


def trainable_fraction(model: "PriorNetModel", include_head: bool = True) -> float:
    """(adapter params [+ head params]) / frozen backbone params, by integer counting."""
    trainable = adapter_param_count(model.adapters.values())
    if include_head:
        trainable += model.head_param_count()
    return trainable / model.frozen_param_count()


def trainable_fraction_for_config(cfg: "EncoderConfig", policy: PlacementPolicy, rank: int,
                                  include_head: bool = True) -> float:
    """Same count as :func:`trainable_fraction` without allocating any weights."""
    from .backbone import frozen_param_shapes, head_param_shapes

    frozen = sum(int(np.prod(s)) for s in frozen_param_shapes(cfg).values())
    n_blocks = len(policy.adapted_layer_indices(cfg.num_blocks))
    trainable = n_blocks * len(PROJECTIONS) * 2 * cfg.d * rank
    if include_head:
        trainable += sum(int(np.prod(s)) for s in head_param_shapes(cfg).values())
    return trainable / frozen
