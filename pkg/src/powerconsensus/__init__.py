"""Simulation and analysis of DC microgrids under voltage-scaled power consensus."""
from .errors import (
    AlgebraicSolveError,
    ConfigError,
    EquilibriumError,
    NetworkError,
    NumericalError,
    StiffnessError,
    VoltageCollapseError,
)
from .netmodel import (
    ConductanceBlocks,
    MicrogridNetwork,
    build_laplacian,
    comm_laplacian,
    kron_reduce,
    kron_reduce_with_shunts,
)
from .loadmodel import ZipLoadBank, load_current, load_current_jacobian, solve_load_voltages
from .controllers import (
    ControllerParams,
    GridState,
    capacitive_load_rhs,
    consensus_rhs,
    constant_voltage_rhs,
    dapi_rhs,
    source_powers,
)
from .simulator import (
    IntegratorSettings,
    LoadEvent,
    Scenario,
    Trajectory,
    simulate,
    steady_state_check,
)

__version__ = "0.1.0"
