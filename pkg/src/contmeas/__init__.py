"""Simulation of quantum measurements continuous in time."""

from importlib.metadata import PackageNotFoundError, version

from contmeas.completeness import (
    CompletenessVerdict,
    HypothesisCheck,
    PurificationReport,
    check_quasi_complete,
    check_theorem2_hypothesis,
    purification_experiment,
)
from contmeas.info import (
    ClassicalInformation,
    InfoReport,
    classical_information,
    classical_information_rate,
    entropy_balance,
    info_report,
    purity_deficit,
    relative_entropy,
    von_neumann_entropy,
)
from contmeas.io import ModelFileError, emit_model, load_model, model_hash, parse_model
from contmeas.lindblad import (
    apply_generator,
    equilibrium_state,
    evolve_master,
    generator_matrix,
    master_series,
    propagator,
)
from contmeas.moments import (
    TestFunction,
    characteristic_series,
    evolve_characteristic,
    mc_characteristic,
    mean_outputs,
    moment_table,
    second_moment,
)
from contmeas.operators import (
    DiffusiveChannel,
    JumpChannel,
    MeasurementModel,
    NumericalError,
    SpectralDecomposition,
    StateValidationError,
    cp_apply,
    pauli,
    pure_state,
    sigma_minus,
    spectral_decompose,
    trace_distance,
    trace_norm,
    validate_state,
)
from contmeas.trajectories import (
    Batch,
    EnsembleSummary,
    NoisePath,
    TimeGrid,
    TrajectoryRecord,
    instrument_estimate,
    normalize_path,
    run_ensemble,
    run_trajectories,
    simulate_linear,
    simulate_posterior,
    summarize,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.1.0"
