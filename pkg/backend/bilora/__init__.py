"""
BiLoRA toolkit

Bi-level optimization of pseudo-SVD low-rank adapters on desk-scale
synthetic tasks, with a finite-difference oracle suite.
"""

__version__ = "0.1.0"
