"""Knowledge-distillation workbench for transformer passage rerankers."""

__version__ = "0.1.0"
