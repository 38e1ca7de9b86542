"""
abnet: frozen pre-trained BERT backbones joined by trainable adapters.

Provides both a CLI and library API for pre-training tiny masked language
models, fine-tuning adapter layers in a sequence-to-sequence assembly and
decoding with Mask-Predict refinement or autoregressive beam search.
"""

__version__ = "0.1.0"
