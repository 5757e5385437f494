"""Continual learning by sparse growth of a small seed CNN.

A task sequence is learned by growing convolution channels only when needed,
claiming kernels per task, reusing frozen kernels of earlier tasks through
learned binary masks, and retraining kernels that no task has claimed yet.
Weights owned by a finished task are never touched again, so old-task
inference stays bit-exact forever; the test suite verifies this at the level
of output-byte fingerprints.
"""

__version__ = "0.1.0"
