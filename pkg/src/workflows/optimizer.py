from typing import Dict

import numpy as np

from config.settings import LearningRates
from src.splatting.scene import SplatGradients, SplatScene


class MomentumOptimizer:
    """Heavy-ball descent with one learning rate per parameter group.

    Updates the scene arrays in place; colors are projected back to [0, 1].
    """

    def __init__(self, scene: SplatScene, rates: LearningRates, momentum: float = 0.9):
        self.rates: Dict[str, float] = rates.model_dump()
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(value) for name, value in scene.groups().items()}

    def step(self, scene: SplatScene, grads: SplatGradients) -> None:
        params = scene.groups()
        for name, grad in grads.items():
            self.velocity[name] = self.momentum * self.velocity[name] + grad
            params[name] -= self.rates[name] * self.velocity[name]
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
