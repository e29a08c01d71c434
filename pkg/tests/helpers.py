"""Random instance builders shared by the tests."""

from __future__ import annotations

import numpy as np

from simota_kit.assigner import CostMatrix


def random_cost_matrix(rng: np.random.Generator, g: int, a: int, lam: float = 3.0, density: float = 0.4,
                       penalty: float = 1e5) -> CostMatrix:
    ious = rng.uniform(0, 1, (g, a)) * (rng.uniform(size=(g, a)) < 0.8)
    cls_costs = rng.uniform(0, 5, (g, a))
    reg_costs = -np.log(ious + 1e-8)
    mask = rng.uniform(size=(g, a)) < density
    bg = rng.uniform(0, 3, a)
    return CostMatrix.from_parts(cls_costs, reg_costs, mask, ious, lam, penalty, bg)
