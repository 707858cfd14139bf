"""Desk-scale stand-ins for radios and web servers."""

from .clock import RealClock, VirtualClock
from .origin import Behavior, Origin, OriginProfile, RequestLog, spawn_origin
from .paths import SimulatedPath

__all__ = [
    "RealClock", "VirtualClock", "Behavior", "Origin", "OriginProfile", "RequestLog",
    "spawn_origin", "SimulatedPath",
]
