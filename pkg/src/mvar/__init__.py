"""Desk-scale multi-view autoregressive image generation.

A from-scratch stack: float64 autodiff tensors, a procedural scene dataset,
a palette VQ tokenizer, a Llama-style decoder with split self-attention,
Plucker-ray shift position encoding and an image warp controller, plus
training with shuffle-views augmentation and progressive condition dropping.
"""

__version__ = "0.1.0"
