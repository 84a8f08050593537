"""Anatomy-specific classification of axial CT slices.

Modules: ``tensor`` (array kernels), ``convnet`` (network, training, model
files), ``tps_augment`` (thin-plate-spline and rigid augmentation),
``dataset`` (manifests, labels, splits, phantoms), ``evaluate`` (ROC/AUC,
confusion matrices), ``volume_profile`` (slice-by-slice volume profiles) and
``cli``.
"""

__version__ = "0.1.0"
