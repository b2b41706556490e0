"""Empirical privacy auditing of DP-SGD.

Trains small models with DP-SGD, plays distinguishing games against them
and turns the outcomes into statistically valid lower bounds on epsilon,
to be compared against the RDP and GDP accountants' upper bounds.
"""

__version__ = '0.1.0'
