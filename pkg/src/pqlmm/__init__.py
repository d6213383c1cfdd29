"""Penalized quasi-likelihood for independent-cluster GLMMs."""
