"""Simulator and verification harness for quantum causal models.

Evaluates multi-time intervention sequences (process tensors) directly,
reconstructs them from an inclusive autonomous Hamiltonian model (system,
bath, ancilla stream, classical memory), and computes trajectory-resolved
work, heat, internal energy, entropy, free energy and entropy production,
checking the identities that relate them.
"""

__version__ = "0.1.0"

from .algebra import (
    DensityOperator,
    FactorRegistry,
    OperatorMatrix,
    gibbs_state,
    herm_exp,
    partial_trace,
    relative_entropy,
    tensor,
    von_neumann_entropy,
)
from .channels import (
    CPMap,
    Instrument,
    InterventionSchedule,
    KrausChannel,
    apply_cp,
    evaluate_process_tensor,
    multilinearity_check,
)
from .dilation import (
    DilationResult,
    MemoryLayout,
    dephasing_unitary,
    dilate_channel,
    dilate_instrument,
    measurement_unitary,
)
from .protocol import Protocol, Segment, discretize_ramp
from .scenario import Scenario, ScenarioError, build_model, parse_scenario
from .simulate import (
    AutonomousModel,
    Branch,
    BranchLedger,
    RunResult,
    Simulator,
    StepTrace,
    apply_instantaneous_control,
    evolve_sb,
)
from .thermo import (
    MeanForceData,
    ThermoEvaluator,
    ThermoLedger,
    evaluate_run,
    mean_force_hamiltonian,
    singular_control_work,
    tpm_work,
)
from .tolerances import DEFAULT, Tolerances
