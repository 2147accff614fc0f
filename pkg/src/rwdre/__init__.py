"""Random walks in dynamic random environments: simulation, couplings, mixing and exact oracles."""
__version__ = "0.1.0"
