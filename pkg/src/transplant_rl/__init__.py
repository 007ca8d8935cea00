"""Rainbow-style agents on small grid games, layer transplant between them, and the transfer grid."""

from .agent import AgentConfig, AtomSupport, RainbowAgent
from .harness import ExperimentGrid, run_child, run_grid, train_parent
from .report import report
from .surgery import Checkpoint, TransplantSpec, load, save, transplant, verify_transplant

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "AtomSupport", "RainbowAgent", "ExperimentGrid", "run_child", "run_grid",
    "train_parent", "report", "Checkpoint", "TransplantSpec", "load", "save", "transplant",
    "verify_transplant",
]
