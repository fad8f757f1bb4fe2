"""Reference exporter: runs a multimodal backbone over (source, edited,
instruction) triplets and writes pooled per-layer hidden-state pairs in the
editprobe interchange format, so downstream layer analysis, probe training,
and evaluation work on real models exactly as on the bundled toy."""

__version__ = "0.1.0"
