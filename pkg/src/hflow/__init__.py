"""Few-shot embedding classifier built around a volume-preserving Householder flow.

The package has a small dense linear-algebra kernel (`linalg`), the learnable
reflection flow (`flow`), the amortized Gaussian posterior and KL machinery
(`posterior`), the training objective (`losses`), the two-stage encoder/adapter
models with hand-derived gradients (`model`), dataset and episode plumbing
(`data`), and an operator CLI (`cli`).
"""

__version__ = "0.1.0"
