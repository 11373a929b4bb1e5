from .buffer import ReplayBuffer, ReplayItem, reservoir_insert, uniform_sample
from .learner import STRATEGIES, Learner, StrategyConfig, make_optimizer, multitask_train, train_task
from .si import SiState, si_accumulate, si_consolidate, si_penalty
from .steps import (
    MixingConfig,
    der_distillation_scl,
    der_distillation_ucl,
    der_step_scl,
    der_step_ucl,
    finetune_step_scl,
    finetune_step_ucl,
    lump_mix,
    lump_step,
)
