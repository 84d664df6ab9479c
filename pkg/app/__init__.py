# -*- coding: utf-8 -*-
"""Gaussian Splatting Reconstruction Toolkit.

A desk-scale, CPU-only toolkit that fits a cloud of anisotropic 3D Gaussians
to posed multi-view images. It bundles a differentiable rasterizer with
analytic gradients, adaptive density control gated by the Gaussian
Divergent Significance (GDS) metric, epipolar weight maps and epipolar
attention for multi-view feature fusion, an orthogonal-plane feature
decomposition block, and the reconstruction losses, exposed both as a
Python library and as a command-line tool.

For comments, bug reports or feature requests, please raise an issue on
our GitHub repository.
"""
from __future__ import annotations

__version__ = "1.0.0"
