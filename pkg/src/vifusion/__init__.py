"""Visual-inertial state estimation and benchmark harness.

Layered as: SO(3) / camera geometry at the bottom, an error-state EKF
front-end and a sliding-window visual-inertial bundle adjustment on top of
it, a feedback stage that fuses back-end results into the filter, plus a
deterministic synthetic-world simulator and trajectory evaluation tools.
"""

__version__ = "0.1.0"
