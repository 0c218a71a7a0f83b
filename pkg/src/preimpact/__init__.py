"""Serial combined impedance control with preemptive impact reduction on a 1D mass."""

from .analysis import (ContactState, SmoothCondition, TransitionClass, check_smooth_condition,
                       closed_form_y, design_omega_a_range, f_tra, impact_metrics,
                       initial_contact_force, reduction_effect, superposition_check, t_extremum)
from .config import ConfigError, ScenarioConfig, build_config, load_config
from .controllers import (PACAC, PACIC, AdmittancePDTerminal, AdmittanceStage, ImpedanceLaw,
                          ImpedanceTerminal, SecondOrderParams, SerialChain)
from .environment import ScenarioKind, build_scenario, min_jerk
from .simulation import SimTrace, simulate

__version__ = "0.1.0"
