"""Bayesian unrolled gradient reconstruction with unsupervised knowledge transfer."""
