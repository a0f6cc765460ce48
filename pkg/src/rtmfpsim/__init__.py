"""A deterministic discrete-event model of an RTMFP-style transport protocol:
sessions with a four-way handshake, message-oriented flows with bundling and
per-flow flow control, and dual-mode loss-based congestion control, plus an
experiment harness for bottleneck-link validation scenarios.
"""

__version__ = "0.1.0"

from . import app, cc, config, engine, flows, harness, netsim, topology, wire  # noqa: F401
