"""Gene regulatory network inference from perturbation data with a fixed-form neural ODE."""

__version__ = "0.1.0"

from .core import GeneVocab, PerturbDataset, Regime, RegimeKind, read_dataset, write_dataset  # noqa: E402
from .model import ModelParams, extract_grn, init_params  # noqa: E402
from .odeint import FlowSpec, flow_map  # noqa: E402
from .train import TrainConfig, fit  # noqa: E402
from .transport import SinkhornConfig, sinkhorn_w2  # noqa: E402

__all__ = ["GeneVocab", "PerturbDataset", "Regime", "RegimeKind", "read_dataset", "write_dataset",
           "ModelParams", "extract_grn", "init_params", "FlowSpec", "flow_map", "TrainConfig", "fit",
           "SinkhornConfig", "sinkhorn_w2"]
