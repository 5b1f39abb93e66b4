"""Few-shot SEM defect classification over frozen image embeddings."""

__version__ = "0.1.0"
