"""Shared numeric constants and tolerances."""

import numpy as np

DTYPE = np.float32

# Condition value fed to the network when the condition is dropped.  Normalized
# properties live in [-1, 1], so this can never collide with a real label.
NULL_CONDITION = -10.0

ALPHA_GUARD = 1e-8
STD_GUARD = 1e-6
LAYERNORM_EPS = 1e-5

# Tolerances used by the test-suite and by runtime self-checks.
GRAD_CHECK_RTOL = 1e-4
SCHEDULE_ATOL = 1e-6
ROUNDTRIP_ATOL = 1e-5

TIME_EMBED_DIM = 16
