"""Softmax-contaminated mixture of experts: model, EM estimator, diagnostics, experiments."""
from .errors import DomainError, InputError
from .estimator import EmConfig, FitResult, em_fit, e_step, log_likelihood, m_step
from .metrics import (ErrorReport, QuadratureConfig, expected_hellinger,
                      hellinger_conditional, loss_d1, loss_d2, param_errors,
                      tv_conditional)
from .model import (ExpertMeanKind, ModelSpec, PretrainedSpec, PromptParams,
                    component_density, conditional_mean, expert_mean,
                    expert_mean_grad, expert_mean_hess, gating_weight,
                    log_density_grad, mixture_density)
from .sampler import Dataset, Scenario, ScenarioTag, make_truth, sample

__version__ = "0.1.0"
