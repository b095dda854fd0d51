"""In-hand rotation on a planar tendon-driven hand.

A privileged PPO teacher is trained against full simulator state, then
distilled into a proprioceptive transformer student that acts from noisy
joint-sensor histories alone.  Everything runs on an in-package reverse-mode
autodiff core over NumPy; the physics inner loop has an optional Cython
kernel with a NumPy fallback chosen at import time.
"""

__version__ = "0.1.0"
