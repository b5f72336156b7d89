"""Prompt-tuned binary segmentation on a frozen toy hierarchical transformer.

The only trainable parameters are the decoder and the prompt components:
a tunable projection of the frozen patch embeddings, per-block adapters fed
by superpixel-pooled features, and a learned attention prompt over raw
image patches. Everything runs in float64 on a small hand-written
reverse-mode tape so gradients can be checked against finite differences.
"""

__version__ = "0.1.0"
