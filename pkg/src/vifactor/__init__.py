"""Visual-inertial estimation toolkit.

Layers: a fixed-lag visual-inertial smoother with partial marginalization
(`estimator`), and a global keyframe mapper (`mapper`) constrained by
relative-pose and gravity-direction factors recovered from the smoother's
marginalization priors (`recovery`).  Synthetic scenarios (`sim`), file
formats and trajectory evaluation (`datasets`), sparse patch tracking
(`flow`) and a command-line front end (`cli`) round out the package.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
