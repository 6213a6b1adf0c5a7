"""Adaptive mixed finite elements for Poisson and Stokes pseudostress problems."""
