"""Full-batch GCN training with staged row-broadcast SpMM on simulated workers."""

from gcnstage.costmodel import Topology, cost_model
from gcnstage.data import Dataset, load_dataset, synth_graph, two_block_graph
from gcnstage.driver import runtime_breakdown, train
from gcnstage.model import GcnConfig
from gcnstage.sparse import CsrMatrix, spmm

__all__ = [
    "CsrMatrix",
    "Dataset",
    "GcnConfig",
    "Topology",
    "cost_model",
    "load_dataset",
    "runtime_breakdown",
    "spmm",
    "synth_graph",
    "train",
    "two_block_graph",
]
__version__ = "0.1.0"
