"""Direction-aggregated transferable adversarial attacks, desk scale.

Subpackage layout: ops/rng/kernels (array core), transforms (input
diversity, kernel smoothing), data and nets (datasets, classifiers,
training), attacks (the attack engine and presets), analysis (transfer
metrics and sweeps), harness + cli (experiment driver).
"""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
