"""Toy decoder-only language model: tokenizer, transformer, training and checkpoints."""
