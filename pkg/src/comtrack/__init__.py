"""Joint tracking of overlapping communities and anomalous nodes in dynamic directed networks."""

__version__ = "0.1.0"

from .model import FactorState, Hyperparams, Schedule, SufficientStats  # noqa: E402
from .snapshots import AdjacencySnapshot, SnapshotSeries, synthetic_scenario  # noqa: E402
from .trackers import InitPolicy, TrackResult, batch_reference, track_exact, track_inexact, track_sgd  # noqa: E402
from .decentralized import AgentTopology, ladder_topology, run_decentralized  # noqa: E402

__all__ = [
    "AdjacencySnapshot", "AgentTopology", "FactorState", "Hyperparams", "InitPolicy", "Schedule",
    "SnapshotSeries", "SufficientStats", "TrackResult", "batch_reference", "ladder_topology",
    "run_decentralized", "synthetic_scenario", "track_exact", "track_inexact", "track_sgd",
]
