from enum import Enum

from pydantic import BaseModel, Field


class OperationKind(str, Enum):
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    FULLY_CONNECTED = "fully-connected"
    RELU = "relu"
    SOFTMAX_CROSS_ENTROPY = "softmax-cross-entropy"
    ELEMENTWISE_ADD = "elementwise-add"
    ELEMENTWISE_MUL = "elementwise-mul"
    MSE = "mse"
    # graph plumbing
    RESHAPE = "reshape"
    SUM = "sum"


class SgdConfig(BaseModel):
    learning_rate: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(64, gt=0)
    epochs: int = Field(10, gt=0)
    seed: int = 0
    # epochs without improvement before early stopping
    patience: int = Field(3, gt=0)
