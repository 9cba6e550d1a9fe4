"""Numerical toolkit for A-quasiconvex envelopes, homogenization of A-free fields and two-scale limits."""

__version__ = "0.1.0"

from .envelope import EnvelopeOptions, convex_envelope_oracle, pointwise_envelope_field, qa_envelope
from .errors import AqxError
from .homogenize import ehom, fhom, membership_check, relaxation_check
from .integrand import IntegrandSpec
from .operator import OperatorSpec, curl_perturbed, custom, divergence_perturbed, scaled_constant
from .projection import deficiency_bound, project, projection_report
from .spectral import Grid, PeriodicField, read_field, write_field
from .twoscale import TwoScaleField, generate_sequence, twoscale_residual, unfold

__all__ = [
    "AqxError", "EnvelopeOptions", "Grid", "IntegrandSpec", "OperatorSpec", "PeriodicField", "TwoScaleField",
    "convex_envelope_oracle", "curl_perturbed", "custom", "deficiency_bound", "divergence_perturbed", "ehom",
    "fhom", "generate_sequence", "membership_check", "pointwise_envelope_field", "project", "projection_report",
    "qa_envelope", "read_field", "relaxation_check", "scaled_constant", "twoscale_residual", "unfold",
    "write_field",
]
