"""Continuous ODF fields from sparse spherical signals, with closed-form uncertainty.

The package fits an orientation-distribution-function field to noisy
single-shell measurements by combining an even-degree spherical harmonic
basis, a sinusoidal coordinate network over voxel space, and a reduced-rank
Gaussian process prior whose conditional posterior is available in closed
form. A classical per-voxel ridge baseline with bootstrap intervals, synthetic
phantoms, downstream quantities (GFA, peaks, tractography) and an experiment
harness round out the library. Entry point: the `nodf` command.
"""

__version__ = "0.1.0"
