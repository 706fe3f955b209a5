"""Desk-scale knowledge distillation for object detection.

Edge-distribution box regression, temperature-scaled classification and
localization distillation with region weighting, a tiny teacher/student
detector pair and a temperature sweep harness, all on a small numpy autodiff
core.
"""

__version__ = "0.1.0"
