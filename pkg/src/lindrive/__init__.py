"""Linear-attention driving stack.

RWKV-7 blocks with dual sequential / chunk-parallel execution, linear
cross-attention, multi-frame sensor-token fusion with constant-memory
streaming, a truncated-diffusion trajectory decoder, PDMS scoring, and a
benchmark harness against a quadratic softmax-attention baseline.
"""

from . import cross_attn, decoder, fusion, harness, pdms, rwkv7, snapshots

__all__ = [
    "cross_attn",
    "decoder",
    "fusion",
    "harness",
    "pdms",
    "rwkv7",
    "snapshots",
]

__version__ = "0.1.0"
