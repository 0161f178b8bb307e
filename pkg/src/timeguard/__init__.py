"""GNSS time-solution validation toolkit.

Cross-checks a receiver's reported UTC time against authenticated network
time (Roughtime, NTS) and a local precision-oscillator ensemble, with an
event-driven policy that escalates from coarse cold-start validation to
continuous fine-grained monitoring.
"""

__version__ = "0.1.0"
