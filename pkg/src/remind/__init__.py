"""Riemannian state reconstruction for self-supervised EEG classification.

Subpackages follow the pipeline: :mod:`spd_geometry` (manifold primitives),
:mod:`frontend` (filtering, position encoding, correlation states),
:mod:`attention`, :mod:`recon` (reconstruction head and loss), :mod:`model`
(forward and exact gradients), :mod:`training`, :mod:`corruption`,
:mod:`data`, :mod:`experiment` and :mod:`cli`.
"""

__version__ = "0.1.0"
