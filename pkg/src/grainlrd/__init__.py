"""Random grain fields with long-range dependence: simulation, Charlier calculus and limit laws."""

__version__ = "0.1.0"
