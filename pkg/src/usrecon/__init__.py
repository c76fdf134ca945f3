"""Compressive recovery of line-structured ultrasound RF frames.

Structured sparse Bayesian learning (BSBL-EM/BO, ST-SBL, T-MSBL), reweighted
least squares baselines and a seeded benchmark harness.
"""

from .core import (
    BlockPartition,
    BModeImage,
    ConditioningError,
    DimensionError,
    InputError,
    MmvProblem,
    RangeError,
    RecoveryResult,
    RfFrame,
    ScaleError,
    SmvProblem,
    SolverConfig,
    make_block_partition,
    ratio_to_measurements,
    read_frame,
    search_space_size,
    write_frame,
)
from .irls import birls, bomp, irls_lp, ksparse_approx, l0_bruteforce, mfocuss
from .sbl import SbState, bsbl_bo, bsbl_em, evidence_objective, posterior_moments, st_sbl, t_msbl
from .sensing import (
    Measurements,
    SensingOperator,
    make_gaussian_operator,
    reconstruct_frame,
    sense_frame,
)
from .transforms import EnvelopeParams, dct_line, hilbert_envelope, idct_line, to_bmode

__version__ = "0.1.0"
