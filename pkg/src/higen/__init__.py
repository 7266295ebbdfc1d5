"""Generative retrieval at desk scale: embedding learning, hierarchical
docID construction, position-weighted sequence decoding, and recall
expansion, wired together by a pipeline CLI."""

__version__ = "0.1.0"
