"""Cross-chain intent settlement with a shared lending vault, plus a simulator.

The core modules (``ledger``, ``markets``, ``intent``, ``settlement``,
``vault``) are plain library code over integer base units. ``fluxlayer.sim``
drives them from a scenario file and ``fluxlayer.cli`` wraps that in a
batch front-end.
"""

__version__ = "0.1.0"
