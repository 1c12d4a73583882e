"""Continual vision-language retrieval with low-rank factored per-task
prompts: a numpy autodiff substrate, a small frozen dual-encoder with deep
prompting and cross-modal fusion, contrastive training objectives, and a
class-incremental evaluation harness."""

__version__ = "0.1.0"
