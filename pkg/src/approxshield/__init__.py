"""Approximate look-ahead shielding for safe exploration in tabular model-based RL."""
from .env import ChainMdp, ChainMdpSpec, ConveyorWorld, ConveyorWorldSpec, make_env
from .harness import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .logic import parse_path_formula, parse_state_formula
from .shield import ShieldConfig, select_action
from .smc import SmcConfig, check, decide, estimate_mu, exact_mu_oracle, required_samples

__all__ = [
    "ChainMdp",
    "ChainMdpSpec",
    "ConveyorWorld",
    "ConveyorWorldSpec",
    "ShieldConfig",
    "SmcConfig",
    "TrainConfig",
    "check",
    "decide",
    "estimate_mu",
    "evaluate",
    "exact_mu_oracle",
    "load_checkpoint",
    "make_env",
    "parse_path_formula",
    "parse_state_formula",
    "required_samples",
    "save_checkpoint",
    "select_action",
    "train",
]
