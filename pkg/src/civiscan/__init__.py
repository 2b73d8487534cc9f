"""civiscan: an image-petition triage pipeline.

Citizen-submitted photographs of urban issues are preprocessed, scanned for
candidate regions, classified by a small trainable convolutional network,
and routed either to an automatic dispatch workflow or to a human review
queue. Ships with a synthetic corpus generator, an evaluation toolkit, a
networked case service with an append-only event log, and a benchmark
harness.
"""

__version__ = "0.1.0"
