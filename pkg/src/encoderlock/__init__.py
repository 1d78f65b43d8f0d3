"""Applicability locking for pre-trained vision encoders.

Selects a small set of encoder weights that matter to a prohibited domain but
not to the authorized one, then edits only those weights so that probing the
encoder for the prohibited domain no longer pays off.
"""

__version__ = "0.1.0"
