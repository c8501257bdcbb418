"""Early action prediction with adversarially enhanced partial-sequence features."""

__version__ = "0.1.0"
