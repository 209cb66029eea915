"""posenas: differentiable architecture search and keypoint estimation.

A small numpy library exposing, layer by layer:

- ``autograd``: reverse-mode AD over dense tensors (tape based)
- ``nn``: convolutions and mobile blocks with explicit adjoints
- ``supernet``: the relaxed search space (mixed layers, drop-path)
- ``cost``: FLOPs/latency lookup tables and the expected-cost regularizer
- ``search``: bilevel weight/architecture optimization loops
- ``arch``: discrete architecture derivation, heads, (de)serialization
- ``data``: synthetic keypoint datasets, heatmaps, PCK
- ``pipeline``: end-to-end config-driven runs and ablations
"""

from . import arch, autograd, cost, data, nn, pipeline, search, supernet

__version__ = "0.1.0"

__all__ = ["arch", "autograd", "cost", "data", "nn", "pipeline", "search", "supernet", "__version__"]
