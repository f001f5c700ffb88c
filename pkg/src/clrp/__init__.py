"""CNN inference engine with layer-wise relevance propagation, contrastive
explanations, and an evaluation harness (pointing game + ablation studies)."""

from .contrastive import (CLRP1, CLRP2, DualConceptSpec, clrp2_negated_last_layer,
                          clrp_explain, dual_output_relevance_clrp1, neuron_explain)
from .inference import ForwardTrace, Prediction, forward, predict_topk, preprocess
from .model import (LayerSpec, ModelContainer, ModelFormatError, load_model,
                    model_info, save_model)
from .relevance import (ExplanationRefused, NumericalError, OutputRelevance,
                        RuleConfig, SaliencyMap, guided_backprop, input_gradient,
                        lrp_explain, propagate_relevance, vanilla_gradient)
from .tensor import (ConvGeometry, ShapeError, avgpool_forward, conv2d_forward,
                     fc_forward, maxpool_forward, relu_forward)

__version__ = "0.1.0"

__all__ = [
    "CLRP1", "CLRP2", "ConvGeometry", "DualConceptSpec", "ExplanationRefused",
    "ForwardTrace", "LayerSpec", "ModelContainer", "ModelFormatError",
    "NumericalError", "OutputRelevance", "Prediction", "RuleConfig",
    "SaliencyMap", "ShapeError", "avgpool_forward", "clrp2_negated_last_layer",
    "clrp_explain", "conv2d_forward", "dual_output_relevance_clrp1", "fc_forward",
    "forward", "guided_backprop", "input_gradient", "load_model", "lrp_explain",
    "maxpool_forward", "model_info", "neuron_explain", "predict_topk",
    "preprocess", "propagate_relevance", "relu_forward", "save_model",
    "vanilla_gradient",
]
