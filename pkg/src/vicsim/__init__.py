"""Variable impedance control toolkit: demonstration learning, stiffness
optimization with an energy tank, whole-body torque control, and a
deterministic contact simulation harness."""

__version__ = "0.1.0"
