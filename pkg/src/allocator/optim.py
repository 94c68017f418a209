"""
optim.py
Step rules: plain gradient descent (default) and Adam
"""
from typing import Dict, Optional

import numpy as np

from utils.data_model import OptimizerKind
from utils.errors import ConfigError


class Optimizer:
    """Maps (name, value, grad) to a new value; never mutates its inputs"""

    def __init__(self, lr: float):
        if not lr > 0:
            raise ConfigError([f"learning rate must be > 0, got {lr}"])
        self.lr = lr

    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        pass

    def select(self, name: str, keep: np.ndarray, axis: int) -> None:
        """Drop state entries of compacted triplets"""
        pass


class SGD(Optimizer):
    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return value - self.lr * grad


class Adam(Optimizer):
    """Bias-corrected adaptive moments, per named parameter"""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m = self.m.get(name, np.zeros_like(value))
        v = self.v.get(name, np.zeros_like(value))
        t = self.t.get(name, 0) + 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name], self.t[name] = m, v, t
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in sorted(self.m):
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
            state[f"t/{name}"] = np.array([float(self.t[name])])
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, array in state.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.m[name] = array.copy()
            elif kind == "v":
                self.v[name] = array.copy()
            elif kind == "t":
                self.t[name] = int(array[0])

    def select(self, name: str, keep: np.ndarray, axis: int) -> None:
        if name in self.m:
            self.m[name] = np.take(self.m[name], keep, axis=axis)
            self.v[name] = np.take(self.v[name], keep, axis=axis)


def make_optimizer(kind: OptimizerKind, lr: float, adam_betas: Optional[tuple] = None) -> Optimizer:
    if kind == OptimizerKind.ADAM:
        return Adam(lr, betas=adam_betas or (0.9, 0.999))
    return SGD(lr)
