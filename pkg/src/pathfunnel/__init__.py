"""Control funnel functions for following path segments with a kinematic bicycle model.

A funnel ``V(theta, b) = b^T C b + c0 theta`` over the path parameter
``theta`` and the body-frame deviation ``b`` is learned from MPC
demonstrations and sampling-based falsification, then turned into a
feedback law and a timing law for ``theta``.
"""
from .control import ControllerState, extract_control
from .dynamics import ControlInput, InputBox, InertialState, integrate
from .funnel import FunnelFunction, load_certificate, save_certificate
from .learn import SynthesisConfig, SynthesisReport, synthesize
from .scenarios import get_scenario
from .sim import Disturbance, Leg, TraceRecord, batch_experiment, run_closed_loop
from .verify import falsify

__version__ = "0.1.0"

__all__ = [
    "ControlInput", "ControllerState", "Disturbance", "FunnelFunction", "InertialState",
    "InputBox", "Leg", "SynthesisConfig", "SynthesisReport", "TraceRecord", "batch_experiment",
    "extract_control", "falsify", "get_scenario", "integrate", "load_certificate",
    "run_closed_loop", "save_certificate", "synthesize",
]
