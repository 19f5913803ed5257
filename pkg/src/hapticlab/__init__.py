"""Haptic rendering simulation lab.

Subpackages and modules: ``dynamics`` (tool-tissue plants), ``koopman``
(lifted linear models), ``render`` (per-tick force pipeline), ``percept``
(observer models), ``contact`` (voxel proxy and energy checks), ``fem``
(small finite elements) and ``harness`` (trials, statistics, CLI).
"""

__version__ = "0.1.0"
