"""vid2ode: recover governing ODEs and unknown forcing from synthetic videos."""

__version__ = "0.1.0"
