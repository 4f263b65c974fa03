"""Block reduction, GradCAM block relevance and distillation for a toy message-passing potential."""

__version__ = "0.1.0"

from .data import Dataset, MolecularSample, generate_dataset, read_dataset, write_dataset  # noqa: E402
from .model import Checkpoint, LossWeights, ModelConfig, init_checkpoint, load_checkpoint, save_checkpoint  # noqa: E402
from .relevance import BlockRelevance, block_relevance  # noqa: E402
from .surgery import ablate_block, param_count, reduce_blocks  # noqa: E402
from .training import KDConfig, TrainBudget, distill, evaluate, finetune, pretrain  # noqa: E402

__all__ = [
    "Dataset", "MolecularSample", "generate_dataset", "read_dataset", "write_dataset",
    "Checkpoint", "LossWeights", "ModelConfig", "init_checkpoint", "load_checkpoint", "save_checkpoint",
    "BlockRelevance", "block_relevance", "ablate_block", "param_count", "reduce_blocks",
    "KDConfig", "TrainBudget", "distill", "evaluate", "finetune", "pretrain",
]
