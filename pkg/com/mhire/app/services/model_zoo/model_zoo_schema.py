from enum import Enum
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    FULLY_CONNECTED = "fully-connected"
    RELU = "relu-activation"
    SOFTMAX = "softmax-output"


PARAMETRIC_KINDS = (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)


class LayerSpec(BaseModel):
    # pooling and activations share the index of the layer they follow
    index: int = Field(..., ge=1)
    kind: LayerKind
    out_features: Optional[int] = Field(None, gt=0)  # conv channels or FC units
    kernel_size: Optional[int] = Field(None, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(0, ge=0)
    frozen: bool = False


class ParameterShape(BaseModel):
    name: str
    shape: List[int]


class ModelHeader(BaseModel):
    """Everything in a model file except the raw weight blobs."""

    name: str
    input_shape: List[int]
    layers: List[LayerSpec]
    parameters: List[ParameterShape]
    unit_masks: List[ParameterShape] = []
    metadata: Dict[str, Union[str, int, float]] = {}
