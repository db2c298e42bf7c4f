"""Shape adaptors: resizing layers whose reshaping factors are learned by
gradient descent alongside the network weights."""
__version__ = "0.1.0"

from .adaptor import GeneralAdaptor, ShapeAdaptor, conv_cell_forward, residual_cell_forward
from .calculus import (AlphaParam, SearchSpace, ShapePlan, apply_penalty, dims_global, dims_local,
                       estimate_macs, init_alpha, module_count, penalty_rho, s_generalized,
                       s_linear)
from .data import Dataset, load_cifar10_binary, synth_dataset
from .kernels import BACKEND, available_backends, set_backend, use_backend
from .network import (CellSpec, NetworkSpec, SpecError, autosc_wrap, build_network, conv_spec,
                      plan_shape, residual_spec, solve_penalty, static_plan, vgg16_spec)
from .report import export_shape_svg, export_trace_json, random_shape_search, read_trace
from .tensor import ShapeError, Tensor, no_grad
from .trainer import (ShapeTrace, TrainConfig, TrainingDiverged, evaluate, load_checkpoint,
                      save_checkpoint, train)
