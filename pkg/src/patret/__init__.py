"""patret: patent-image retrieval engine.

Ingestion of patent-drawing metadata, distribution-aware contrastive
training of an embedding projector, exact temporally-filtered cosine
retrieval, long-tail-aware evaluation metrics, and an HTTP service for
interactive search and blind A/B user studies.
"""

__version__ = "0.1.0"
