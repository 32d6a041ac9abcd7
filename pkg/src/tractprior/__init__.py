"""LLM-derived white-matter connection priors and their downstream use.

Modules cover parcellations and connectomes, prompt rendering, a chat gateway
with record/replay, prior aggregation, retrieval grounding, evaluation,
prior-augmented filtering and a network diffusion model.
"""

__version__ = "0.1.0"
