"""Monte Carlo measurement lab: event-probability estimators, occupation
histograms with analytic envelopes, the two-scatterer middle-segment lab,
cross-leg event detection and diffusive-scaling diagnostics."""

from .estimators import estimate_event_probability
from .interleg import run_interleg
from .middle import (lambda_measure_estimate, middle_segment_sample,
                     middle_tail_curves, sample_middle_batch)
from .occupation import occupation_histogram, RadialHistogram
from .scaling import scaling_diagnostics
from .stats import EstimateCI, fit_log_slope, wilson

__all__ = [
    "estimate_event_probability", "run_interleg", "lambda_measure_estimate",
    "middle_segment_sample", "middle_tail_curves", "sample_middle_batch",
    "occupation_histogram", "RadialHistogram", "scaling_diagnostics",
    "EstimateCI", "fit_log_slope", "wilson",
]
