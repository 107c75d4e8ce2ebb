"""Probabilistic solver for forward and inverse PDE problems with noisy data:
a confidence-gated interpolation between a learned feature map and a Gaussian
process prior feeds an integral-operator decoder whose output is a conditional
Gaussian over the solution field; PDE residuals act as soft constraints."""

__version__ = "0.1.0"
