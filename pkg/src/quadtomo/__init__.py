"""Tomography of bosonic modes and qubit-field systems measured with noisy linear detectors."""

from . import fock, joint, mle, modematch, moments, phasespace, simulate, twochannel
from .estimators import IterativeTomography, JointTomography, MomentTomography, PositivePTomography
from .moments import MomentTable
from .phasespace import PhaseGrid
from .simulate import Histogram2D, MeasurementRecord, NoiseModel

__version__ = "0.1.0"

__all__ = [
    "fock", "joint", "mle", "modematch", "moments", "phasespace", "simulate", "twochannel",
    "IterativeTomography", "JointTomography", "MomentTomography", "PositivePTomography",
    "MomentTable", "PhaseGrid", "Histogram2D", "MeasurementRecord", "NoiseModel",
]
