"""Gated cross-attention drug-target affinity toolkit"""

__version__ = '0.1.0'
