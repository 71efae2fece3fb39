"""TGO lab: threshold-guided alignment from scalar feedback on enumerable environments."""

__version__ = "0.3.0"
