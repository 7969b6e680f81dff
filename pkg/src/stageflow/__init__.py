"""Schema-validated staged-curriculum RL: YAML bundle compiler, reward DSL,
PPO trainer, scoring, retrieval store, and an LLM generation pipeline."""

from .errors import StageflowError

__version__ = "0.1.0"

__all__ = ["StageflowError", "__version__"]
