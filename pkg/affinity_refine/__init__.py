# Adaptive affinity / label reassign refinement toolkit
__version__ = "0.1.0"
