"""Stochastic Volterra solver package."""
