"""Desk-scale hospital imaging grid: federated metadata, replicated files,
data-aware job placement and switchable deployment topologies over a
simulated WAN."""

from .errors import HospigridError
from .federation import Topology, load_topology, parse_topology
from .grid import Grid
from .jobs import DataLocalPolicy, RandomPolicy
from .model import DicomLiteFile, parse_dicom_lite, pseudonymize, serialize_dicom_lite

__all__ = [
    "DataLocalPolicy", "DicomLiteFile", "Grid", "HospigridError", "RandomPolicy", "Topology",
    "load_topology", "parse_dicom_lite", "parse_topology", "pseudonymize", "serialize_dicom_lite",
]

__version__ = "0.1.0"
