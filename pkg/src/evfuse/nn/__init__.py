from .backbone import Backbone, BackboneSpec, handcrafted_backbone, random_backbone
from .functional import (SGD, bce_loss, conv2d, conv2d_backward, fc, fc_backward,
                         instance_embedding_loss, max_pool2d, relu, sgd_step, softmax)
from .weights import load_weights, parse_weights, save_weights, serialize_weights

__all__ = [
    "Backbone", "BackboneSpec", "handcrafted_backbone", "random_backbone",
    "SGD", "bce_loss", "conv2d", "conv2d_backward", "fc", "fc_backward",
    "instance_embedding_loss", "max_pool2d", "relu", "sgd_step", "softmax",
    "load_weights", "parse_weights", "save_weights", "serialize_weights",
]
