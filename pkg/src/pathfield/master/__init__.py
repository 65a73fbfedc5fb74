"""Decoupling field, Sobolev solutions and master-equation checks."""
from .closed_forms import (CASES, CaseParams, ClosedForm, HeatQuadratic, KinkError, LinearClosedForm,
                           closed_form_library, explicit_delay_path, explicit_delay_measure, limit_value)
from .field import (PRESETS, CompareReport, FieldEstimate, FlowReport, MasterProblem, check_flow,
                    compare_fields, decoupling_field, derivative_fields, fd_measure_derivative,
                    fd_path_derivative, sobolev_eval, within)
from .mollifier import Mollifier, PointMass, mollify_generator, mollify_terminal
from .residual import (DecouplingProvider, ResidualReport, SobolevProvider, mollify_sweep, pde_residual,
                       sweep_monotone)
