"""Open-vocabulary multi-label recognition with adaptive patch refinement and
LLM-mined inter-category transfer, on precomputed embeddings."""

__version__ = "0.1.0"
