"""Homotopy training of fully connected networks."""
from .homotopy import (AddLayer, HomotopyBlend, HtaSchedule, SubnetView, Widen, add_layer, blend_forward,
                       blend_loss_grad, hta_train, multi_stage_train, plain_train, widen)
from .linalg import Rng
from .network import Activation, LossKind, Mlp, backward, forward, loss_and_grad
from .optim import Constant, Diminishing, DivergenceError, Trace, TrainConfig, train

__version__ = "0.1.0"
