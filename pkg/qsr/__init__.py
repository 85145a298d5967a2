"""
qsr: single-image super-resolution by sparse coding, with the coefficients
found either by lasso or by annealing binary (QUBO) formulations.
"""

__version__ = "1.0.0"
