"""Synthetic mmWave channel-sounder toolkit: measurement synthesis and
CLEAN / SAGE / RiMAX multipath parameter extraction over rotated planar
array fields of view."""

from .geometry import (
    DEFAULT_ROTATIONS,
    MpcParam,
    SounderConfig,
    fov_contains,
    global_to_local,
    load_mpc_csv,
    local_to_global,
    principal_alias,
    save_mpc_csv,
)
from .beampattern import BeampatternGrid, analytic_pattern, eval_pattern
from .synthesis import (
    MeasurementSet,
    add_noise,
    noise_psd_for_snr,
    synthesize,
    synthesize_multi_fov,
)
from .beamspace import (
    SearchGrid,
    beamspace_tensor,
    make_search_grid,
    matched_amplitude,
    model_vector,
    objective,
)
from .dmc import DelayWhitener, DmcModel, fit_dmc
from .estimators import (
    EstimateSet,
    EstimatorConfig,
    EstMpc,
    clean_extract,
    clean_sage_extract,
    ls_amplitudes,
    rimax_extract,
    sage_refine,
    single_mpc_update,
)
from .evaluation import (
    AssociationResult,
    associate,
    empirical_sigmas,
    error_report,
    nmse,
    nmse_of_k,
    pairwise_cost,
)
from .scenarios import PRESETS, SCENARIOS, builtin_mpcs, preset
from .fileio import (
    blob_sha1,
    load_estimates,
    load_measurement,
    save_estimates,
    save_measurement,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
