"""Emulated edge/cloud streaming platform for crowdsourced vehicle data.

The platform runs in one process on a virtual clock (``runtime.Platform``)
or across processes on the host clock (``harness.multiproc``).
"""
from .domain import (
    DataQuery, DataSample, DataType, FlowDescriptor, GeoPoint, GeoRegion, Licence,
    ProducerDescriptor, SlaContract, licences,
)
from .runtime import Platform

__version__ = "0.1.0"

__all__ = [
    "DataQuery", "DataSample", "DataType", "FlowDescriptor", "GeoPoint", "GeoRegion", "Licence",
    "ProducerDescriptor", "SlaContract", "licences", "Platform", "__version__",
]
