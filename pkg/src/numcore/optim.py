"""
Optimizer

Adam with decoupled weight decay and a linear warmup, applied to named
parameter groups (model weights and gate logits move at different rates).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ParamGroup:
    """Parameters sharing a learning rate and weight decay."""

    params: Dict[str, Tensor]
    lr: float
    weight_decay: float = 0.0
    label: str = "weights"


@dataclass
class AdamW:
    """
    Decoupled-weight-decay Adam.

    Attributes:
        groups: Parameter groups, updated in order
        betas: Moment decay rates
        eps: Denominator guard
        warmup_steps: Steps over which the rate ramps linearly from 0 to its base value
        max_grad_norm: Global gradient-norm clip (None disables clipping)
    """

    groups: List[ParamGroup]
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    max_grad_norm: Optional[float] = 1.0
    step_count: int = 0
    _m: Dict[str, np.ndarray] = field(default_factory=dict)
    _v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_scale(self) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, self.step_count / self.warmup_steps)

    def step(self, grads: Mapping[str, Tensor]) -> float:
        """
        Apply one update in place (parameter .data arrays are replaced).

        Args:
            grads: Gradient map from Graph.backward; parameters absent from it are skipped

        Returns:
            Global gradient norm before clipping
        """
        self.step_count += 1
        beta1, beta2 = self.betas
        scale = self.lr_scale()

        present = [
            (group, name, tensor)
            for group in self.groups
            for name, tensor in group.params.items()
            if name in grads
        ]
        norm = float(np.sqrt(sum(float(np.sum(grads[name].data ** 2)) for _, name, _ in present)))
        clip = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            clip = self.max_grad_norm / (norm + 1e-12)

        for group, name, tensor in present:
            g = grads[name].data * clip
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
            v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
            self._m[name], self._v[name] = m, v

            m_hat = m / (1 - beta1**self.step_count)
            v_hat = v / (1 - beta2**self.step_count)
            lr = group.lr * scale
            data = tensor.data
            if group.weight_decay and data.ndim >= 2:
                data = data * (1.0 - lr * group.weight_decay)
            tensor.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

        return norm
