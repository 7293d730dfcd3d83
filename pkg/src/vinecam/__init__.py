"""Dense-connectivity leaf disease classifier on a numpy autodiff core.

Modules: ``imageprep`` (preprocessing chain), ``dataset`` (catalog, splits,
folds), ``autodiff`` (tensors and tape), ``densenet`` (model and presets),
``checkpoint``, ``training``, ``gradcam``, ``metrics``, ``commands``/``cli``.
"""

__version__ = "0.1.0"
