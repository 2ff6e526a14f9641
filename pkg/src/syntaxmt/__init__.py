"""Joint translation and dependency parsing with a supervised encoder
attention head, plus linearized secondary tasks for multi-task training."""

__version__ = "0.1.0"
