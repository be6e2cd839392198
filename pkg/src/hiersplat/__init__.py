"""Semantic Gaussian-splatting SLAM with hierarchical symbolic label coding.

Supports RGB-D and monocular (depth-prior) operation, one-hot / binary /
flat semantic embeddings, and an LLM-assisted taxonomy builder.
"""

__version__ = "0.1.0"
