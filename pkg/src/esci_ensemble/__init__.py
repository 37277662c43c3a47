"""Query-product ESCI relevance ensemble: graph extraction, candidates, GBDT, attribution and selection."""

__version__ = "0.1.0"
