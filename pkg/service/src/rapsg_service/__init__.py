"""Reference summarization service and embedding exporter.

Serves the summarize/refine wire protocol in two modes: "model" wraps
real pre-trained summarization and generation models; "echo" implements
the pipeline's extractive fallback algorithm bit-for-bit so the primary
component's conformance tests can run without model assets. The exporter
encodes text or image lists into the binary embedding-store format.
"""

__version__ = "0.1.0"
