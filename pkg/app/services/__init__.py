"""Numerical services of the lab: spectral operators, noise, models, integrators and diagnostics"""
