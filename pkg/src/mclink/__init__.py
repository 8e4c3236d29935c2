"""Desk-scale molecular communication link lab.

Closed-form diffusive channel physics with a Brownian-dynamics oracle, a
learned Gaussian-mixture channel surrogate, an end-to-end semantic
transceiver trained through it, and a separate-coding baseline for
comparison. See the README for the CLI pipeline.
"""

__version__ = "0.1.0"
