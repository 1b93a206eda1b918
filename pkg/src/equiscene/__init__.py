"""Physics-consistent joint shape and pose estimation for rigid-body scenes.

Estimates convex-hull shapes and poses of multiple rigid bodies from point
clouds while enforcing quasistatic frictional force/torque equilibrium via a
separating-plane barrier contact model inside an augmented-Lagrangian /
Levenberg-Marquardt solver with structure-exploiting linear algebra.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
