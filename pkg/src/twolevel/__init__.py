"""Two-level IoT territory simulator.

A coarse, time-stepped, parallel agent-based simulator (Level 0) disseminates
messages among mobile and static entities on a torus via probabilistic
distance-gated broadcast; it can hand small groups of entities to isolated
fine-grained event-driven wireless instances (Level 1) over a TCP coupling
protocol and reabsorb them at coarse step boundaries.

The package init stays import-light on purpose: every spawned Level 1
instance is a fresh `twolevel.cli run-l1` process, and the client path
(`coupling`, `level1`) must not drag in numpy.  Import the kernels from
their modules: `twolevel.level0`, `twolevel.level1`, `twolevel.coupling`,
`twolevel.multilevel`, `twolevel.harness`.
"""

from .dissemination import DedupCache, Message, PbBConfig, ReceiveOutcome
from .geometry import ConfigError, WorldExtent, extent_for_entities, torus_distance, wrap

__version__ = "0.1.0"
