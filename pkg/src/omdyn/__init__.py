"""Classical nonlinear dynamics of a driven optomechanical cavity.

Fixed points, adaptive high-order integration with tangent dynamics, chaos
indicators (Lyapunov spectrum, SALI, GALI_k), attractor classification,
mechanical spectra and parameter sweeps.
"""
__version__ = "0.1.0"

from .model import (SystemParams, State, Stability, FixedPointRecord, eom_rhs, eom_jacobian,
                    find_fixed_points, stability_diagram, region_code, region_codes, cooperativity,
                    power_from_cooperativity, thermal_sigma)
from .integrator import (IntegratorConfig, IntegrationError, DeviationSet, Trajectory,
                         TangentIntegrator, integrate, integrate_with_deviations)
from .indicators import (IndicatorSeries, LyapunovSpectrum, gali_k, log_gali_k, sali,
                         indicator_series, lyapunov_spectrum)
from .classifier import (Kind, AttractorClass, AttractorId, ClassifierConfig, EscapeReport,
                         classify, detect_crossover, escape_time, fingerprint)
from .spectral import (SpectrumSlice, RampSpectrogram, CombResult, mechanical_spectrum,
                       comb_analysis, adiabatic_ramp)

