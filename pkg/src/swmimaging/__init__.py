"""Sliding-window reconstruction and Fisher analysis for correlation imaging."""

from .forward import MeasurementModel, MeasurementSet, SPDC, Thermal, build_tensor
from .optics import DetectorGrid, ImagingSystem, ObjectModel
from .phantoms import phantom
from .sim import synthesize_dataset
from .swm import PipelineConfig, reconstruct

__all__ = ["DetectorGrid", "ImagingSystem", "MeasurementModel", "MeasurementSet", "ObjectModel",
           "PipelineConfig", "SPDC", "Thermal", "build_tensor", "phantom", "reconstruct",
           "synthesize_dataset"]
