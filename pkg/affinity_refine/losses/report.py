from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from affinity_refine.tensor_core import DenseTensor


@dataclass(slots=True)
class LossReport:
    """Scalar loss, its named terms, and the gradient w.r.t. the loss input."""

    total: float
    terms: dict[str, float] = field(default_factory=dict)
    grad: np.ndarray | None = None

    def grad_tensor(self) -> DenseTensor | None:
        return None if self.grad is None else DenseTensor.from_array(self.grad)

    def to_dict(self) -> dict[str, Any]:
        return {"total": self.total, **self.terms}
