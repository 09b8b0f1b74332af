"""Federated LoRA simulation engine.

Dual shared/private low-rank adapters on a frozen toy backbone, selective
stacking aggregation with rank-budget re-compression, baseline
aggregators (zero padding, fedavg, monolithic stacking), and DP-SGD
applied to the shared module only.
"""

from fedlora._kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
