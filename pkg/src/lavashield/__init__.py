"""Safe-exploration laboratory: crossing gridworlds, exact solvers,
cross-task action priors, a contrastive latent safety gate, and shielded
tabular agents."""

from .gridworld import (
    Action,
    AgentState,
    CellKind,
    Direction,
    GridSpec,
    SafetyLabel,
    Transition,
    classify_state,
    generate_crossing,
    load_map,
    observe,
    save_map,
    step,
)
from .latent import EncoderConfig, EncoderModel, EncoderTrainer, encode
from .priors import PriorConfig, PriorTransition, select_prior_transitions, train_prior_q
from .shield import ShieldConfig, UnsafeEmbeddingBuffer, shield_action
from .solver import QFunction, value_iteration
from .agent import AgentConfig, run_training

__version__ = "0.1.0"
