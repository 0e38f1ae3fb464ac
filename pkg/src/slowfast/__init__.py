"""Spectral-Galerkin simulation of slow-fast SPDEs and averaging-rate experiments."""
import os

# set before numba is imported: prefer OpenMP over an outdated system TBB
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

__version__ = "0.1.0"
