"""Decentralized optimal power flow: learn local DER controllers from centralized OPF solutions.

Modules
-------
feeder      network model, capacity sets, feeder file formats
scenarios   scenario time series: ingest, synthesis, splits
conic       interior-point solver for second-order cone programs
powerflow   nonlinear and linearized power flow
opf         centralized OPF and scenario labelling
info        mutual-information metrics and communication-set selection
policy      stepwise polynomial policies with saturation
simulate    control-mode replay and comparison
cli         command-line pipeline
"""

from .feeder import Box, Bus, BusKind, Branch, Disk, Network, PvResidual, load_network, save_network
from .opf import OpfConfig, label_set
from .scenarios import ScenarioSet, ingest, split, synthesize

__version__ = "0.1.0"

__all__ = [
    "Box", "Bus", "BusKind", "Branch", "Disk", "Network", "PvResidual", "load_network", "save_network",
    "OpfConfig", "label_set", "ScenarioSet", "ingest", "split", "synthesize",
]
