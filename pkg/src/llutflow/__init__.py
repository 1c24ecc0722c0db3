"""Train tree-assembled L-LUT networks and compile them to truth tables and Verilog."""

__version__ = "0.1.0"

from .compiler import TruthTable, compile_network, export_tables, import_tables
from .config import ModelConfig, load_config, tree_shape, validate_config
from .model import Network, build_network
from .netlist import EveryK, EveryLayer, build_netlist, classify, simulate, simulate_stream, stats
from .quant import QuantSpec, quantize_features
from .trainer import TrainHyperparams, run_pipeline

__all__ = [
    "EveryK", "EveryLayer", "ModelConfig", "Network", "QuantSpec", "TrainHyperparams", "TruthTable",
    "build_netlist", "build_network", "classify", "compile_network", "export_tables", "import_tables",
    "load_config", "quantize_features", "run_pipeline", "simulate", "simulate_stream", "stats",
    "tree_shape", "validate_config",
]
