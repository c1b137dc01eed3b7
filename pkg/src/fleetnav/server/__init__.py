"""Self-hosted fleet backend: durable store plus HTTP front end."""

from .http import FleetServer
from .store import FleetStore, SimulatedCrash

__all__ = ["FleetServer", "FleetStore", "SimulatedCrash"]
