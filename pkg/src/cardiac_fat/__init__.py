"""Epicardial and mediastinal fat segmentation and quantification for cardiac CT.

The pipeline windows CT slices to the fat range, registers each scan on a
retrosternal atlas, classifies fat pixels with per-class random forests
trained on texture features, and integrates the masks into volumes.
"""

__version__ = "0.1.0"
