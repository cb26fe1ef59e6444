"""Access-point ON/OFF switching for cell-free massive MIMO downlinks.

Modules: ``scenario`` (drops), ``channel`` (Monte Carlo statistics),
``conic`` (SOCP backend), ``problems`` (P1/P2/P3 and max-min SINR),
``switching`` (greedy activation and pruning) and ``harness`` (experiments).
"""

__version__ = "0.1.0"
