"""
Test package for the sampler lab.
"""

