"""Correlation-aware aleatoric uncertainty for multi-joint regression.

Subpackages:

* ``gaussian_core`` -- Gaussian beliefs, covariance parameterizations,
  densities, sampling, per-joint trace uncertainty.
* ``loss_heads``    -- training losses with analytic gradients.
* ``net``           -- trainable regressor, heads, AdamW, checkpoints.
* ``handsim``       -- synthetic hand-joint data with a known noise oracle.
* ``uq_metrics``    -- sparsification curves, AUSC/AUSE, Pearson, (PA-)MPJPE.
* ``cli``           -- the ``handuq`` command-line interface.
"""

__version__ = "0.1.0"
