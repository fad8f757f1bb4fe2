"""editprobe: probing-based quality assessment for text-guided image editing.

Pipeline pieces: subjective-rating processing into MOS, per-layer hidden-state
statistics and probing-layer selection, low-rank adapter fine-tuning of a toy
multimodal backbone, MLP score regression, rank-correlation evaluation, and
classical full-reference baselines.
"""

__version__ = "0.1.0"
