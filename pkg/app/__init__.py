"""
DualFast Sampler Lab
Exponential-integrator diffusion ODE samplers (DDIM, DPM-Solver, DPM-Solver++, UniPC)
with the DualFast approximation-error correction, evaluated on Gaussian-mixture oracles.
"""

__version__ = "1.0.0"
