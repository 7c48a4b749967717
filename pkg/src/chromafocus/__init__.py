"""Colour-from-focus: GRIN ball-lens ray casting, event synthesis and spectral analysis."""
from .dispersion import BallLensSpec, efl_bfl, image_distance_and_magnification, model_from_dict
from .pupil import Annulus, CircularHole, FullAperture, OffAxisSlit, PolylineBand, W_PUPIL
from .tracer import GrinSphere, TraceConfig, trace_point_source
from .retina import IntensityStack, RetinaGrid, peak_profile, read_stack, sweep, write_stack
from .events import ActuatorProfile, DistanceMapping, EventSimParams, EventSynthesizer, synthesize_events
from .analysis import FocusCurve, FocusSpectrometer, find_peak_and_fwhm, resolving_power
from .segment import FocalCalibrationMap, FocusSegmenter, segment_sweep

__version__ = "0.1.0"
