"""shapespace: factorized latent spaces for deforming 3D shapes.

Separates what a point cloud looks like into how it is oriented (a rigid
rotation), how it is posed (articulated, extrinsic), and what it intrinsically
is (isometry-invariant geometry), using Laplace-Beltrami spectra as the
intrinsic anchor.
"""

__version__ = "0.1.0"
