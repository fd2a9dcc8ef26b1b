"""
GMWB Monte Carlo Engine - Source Package

Pricing and risk of guaranteed minimum withdrawal benefits with
VIX-linked fees under a stochastic volatility jump model, simulated with
an explicit weak solution, likelihood weights and branching.
"""
