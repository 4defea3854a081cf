"""maskpipe: mask-detection tooling around a pluggable detection backbone.

Box geometry and NMS, grid-tensor decoding, the weighted detection loss,
a Mahalanobis few-shot classification head, VOC dataset tooling with
undersampling and augmentation, evaluation metrics, and a streaming video
annotation pipeline with frame skipping and instance tracking.
"""

__version__ = "0.1.0"
