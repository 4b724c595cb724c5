"""Multi-view item network recommender over a knowledge graph."""

__version__ = "0.1.0"
