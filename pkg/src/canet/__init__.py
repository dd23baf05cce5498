"""canet: multi-scale temporal and group spatial attention for video features.

Forward kernels with naive-loop oracle twins, hand-written adjoints certified
by finite differences, analytic parameter/MAC accounting for ResNet-50-shaped
networks, and a synthetic-motion training harness.

Submodules import numpy lazily relative to the CLI so thread pinning can
happen first; import what you need directly:

    from canet import kernels, autograd, mtcm, gscm, network, training, dataset
"""

__version__ = "0.1.0"
