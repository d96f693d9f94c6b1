"""MLP node classifiers trained with neighbourhood distillation losses,
plus a reference GCN and latency tools."""

__version__ = "0.1.0"
