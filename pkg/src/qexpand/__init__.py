"""Query expansion for embedding retrieval: classic aggregators and a learned attention aggregator."""

__version__ = "0.1.0"
