"""Character proposal network: dense characterness scoring and box refinement."""
from charprop.boxes import BBox, decode_regression, encode_regression, iou
from charprop.inference import Proposal, PyramidConfig, generate_proposals, nms
from charprop.network import Model, builtin_spec, compute_stride, forward_full, forward_patch, validate_geometry
from charprop.templates import TemplateSet, cluster_templates, template_size

__version__ = "0.1.0"
