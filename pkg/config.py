#!/usr/bin/env python3
"""
Configuration file for the qlink entanglement-link tools
Contains all constants, defaults and environment knobs shared by the modules.
"""

import os

TOOL_VERSION = "1.4.0"

# Logging Configuration
LOG_LEVEL = os.environ.get("QLINK_LOG_LEVEL", "WARNING")  # WARNING keeps the kernels quiet on big runs

# Parallelism
# QLINK_THREADS caps every internal thread pool; unset means one worker per core.
QLINK_THREADS = int(os.environ.get("QLINK_THREADS", "0")) or (os.cpu_count() or 1)

# Numerical tolerances
ALGEBRA_TOL = 1e-12
EIGEN_TOL = 1e-10

# Simulation
SIM_CHUNK_S = 1.0  # pair emission is generated in chunks of this many seconds
FWHM_PER_SIGMA = 2.354820045030949  # 2*sqrt(2*ln 2)

# Coincidence matching
DEFAULT_WINDOW_PS = 1000  # ~1.4x the 0.7 ns link FWHM

# Delay search
COARSE_BINS = 1024
MAX_SEARCH_BINS = 1 << 18
PEAK_SIGNIFICANCE_SIGMA = 5.0
BACKGROUND_EXCLUSION_FWHM = 10.0
MAX_GRID_CELLS = 1 << 25  # largest dense grid the coarse correlator may allocate

# Drift tracking
DRIFT_SEARCH_SPAN_PS = 100_000_000  # +-100 us around the coarse delay
DRIFT_PASSES = 4
DRIFT_SPAN_SHRINK = 32

# Analysis
DEFAULT_EC_INEFFICIENCY = 1.1
QBER_THRESHOLD = 0.11
DEFAULT_BLOCKS = 39
KEY_RATE_FORMULA = "R = C * 1/2 * max(0, 1 - (1 + f) * H2(Q))"

# Tag files
TAG_MAGIC = b"QTAGS\x00\x00\x01"
READ_CHUNK_RECORDS = 1 << 16
