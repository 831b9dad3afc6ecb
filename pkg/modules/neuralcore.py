"""
Differentiable building blocks for WheelSurrogate models

Thin layer over torch: declared layer specs with static shape algebra, checked
forward calls, reverse-mode gradients through torch.autograd, the Adam update,
losses and seeded initialization. Shapes exclude the batch dimension.
"""
import os
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from utils.exceptions import GraphError, ShapeMismatchError, TrainingError, ValidationError

Shape = Tuple[int, ...]

LAYER_KINDS = (
    'dense', 'conv2d', 'conv3d', 'upsample2d', 'upsample3d', 'relu', 'linear_head',
    'flatten', 'reshape', 'concat', 'gaussian_sample',
)
MULTI_INPUT_KINDS = ('concat', 'gaussian_sample')


# ============== Layer specs ==============

@dataclass(frozen=True)
class LayerSpec:
    """
    Declared layer: kind, input shape(s) and kind-specific parameters

    Parameters per kind:
        dense, linear_head: out_features
        conv2d, conv3d: out_channels, kernel (3), stride (1), padding (kernel // 2), linear (False)
        reshape: shape
    Multi-input kinds (concat, gaussian_sample) take a tuple of input shapes.
    """
    kind: str
    input_shape: Union[Shape, Tuple[Shape, ...]]
    params: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"Unknown layer kind {self.kind!r}", field='kind')

    @property
    def label(self) -> str:
        return self.name or self.kind

    def input_shapes(self) -> List[Shape]:
        if self.kind in MULTI_INPUT_KINDS:
            return [tuple(shape) for shape in self.input_shape]
        return [tuple(self.input_shape)]

    @property
    def output_shape(self) -> Shape:
        shapes = self.input_shapes()
        shape = shapes[0]
        kind, p = self.kind, self.params
        if kind in ('dense', 'linear_head'):
            self._expect_rank(shape, 1)
            return (int(p['out_features']),)
        if kind in ('conv2d', 'conv3d'):
            dims = 2 if kind == 'conv2d' else 3
            self._expect_rank(shape, dims + 1)
            kernel = int(p.get('kernel', 3))
            stride = int(p.get('stride', 1))
            padding = int(p.get('padding', kernel // 2))
            spatial = tuple((n + 2 * padding - kernel) // stride + 1 for n in shape[1:])
            if any(n < 1 for n in spatial):
                raise ShapeMismatchError(self.label, f"spatial size >= {kernel}", shape)
            return (int(p['out_channels']),) + spatial
        if kind in ('upsample2d', 'upsample3d'):
            self._expect_rank(shape, 3 if kind == 'upsample2d' else 4)
            return (shape[0],) + tuple(2 * n for n in shape[1:])
        if kind == 'relu':
            return shape
        if kind == 'flatten':
            return (int(np.prod(shape)),)
        if kind == 'reshape':
            target = tuple(int(n) for n in p['shape'])
            if int(np.prod(target)) != int(np.prod(shape)):
                raise ShapeMismatchError(self.label, f"{int(np.prod(target))} values", shape)
            return target
        if kind == 'concat':
            for s in shapes:
                self._expect_rank(s, 1)
            return (sum(s[0] for s in shapes),)
        # gaussian_sample
        if len(shapes) != 2 or shapes[0] != shapes[1]:
            raise ShapeMismatchError(self.label, "two equal shapes (mu, logvar)", shapes)
        return shapes[0]

    def _expect_rank(self, shape: Shape, rank: int) -> None:
        if len(shape) != rank:
            raise ShapeMismatchError(self.label, f"rank {rank}", shape)


# ============== Modules ==============

class Reshape(nn.Module):
    def __init__(self, shape: Shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape((x.shape[0],) + self.shape)


class Concat(nn.Module):
    def forward(self, *xs: torch.Tensor) -> torch.Tensor:
        return torch.cat(xs, dim=1)


class GaussianSample(nn.Module):
    """Reparameterized draw mu + exp(logvar / 2) * eps; eps of the last call is kept"""

    def __init__(self):
        super().__init__()
        self.generator: Optional[torch.Generator] = None
        self.fixed_eps: Optional[torch.Tensor] = None
        self.last_eps: Optional[torch.Tensor] = None

    def forward(self, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        if self.fixed_eps is not None:
            eps = self.fixed_eps.to(dtype=mu.dtype)
        else:
            eps = torch.randn(mu.shape, generator=self.generator, dtype=mu.dtype, device=mu.device)
        self.last_eps = eps.detach()
        return mu + torch.exp(0.5 * logvar) * eps


def _make_module(spec: LayerSpec) -> nn.Module:
    p = spec.params
    in_shape = spec.input_shapes()[0]
    if spec.kind in ('dense', 'linear_head'):
        return nn.Linear(in_shape[0], int(p['out_features']))
    if spec.kind in ('conv2d', 'conv3d'):
        conv = nn.Conv2d if spec.kind == 'conv2d' else nn.Conv3d
        kernel = int(p.get('kernel', 3))
        return conv(in_shape[0], int(p['out_channels']), kernel,
                    stride=int(p.get('stride', 1)), padding=int(p.get('padding', kernel // 2)))
    if spec.kind in ('upsample2d', 'upsample3d'):
        return nn.Upsample(scale_factor=2, mode='nearest')
    if spec.kind == 'relu':
        return nn.ReLU()
    if spec.kind == 'flatten':
        return nn.Flatten()
    if spec.kind == 'reshape':
        return Reshape(spec.output_shape)
    if spec.kind == 'concat':
        return Concat()
    return GaussianSample()


class Layer(nn.Module):
    """A torch module bound to its declared spec; inputs are shape-checked"""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        self.out_shape = spec.output_shape
        self.module = _make_module(spec)

    @property
    def is_linear_output(self) -> bool:
        return self.spec.kind == 'linear_head' or bool(self.spec.params.get('linear', False))

    def forward(self, *inputs: torch.Tensor) -> torch.Tensor:
        expected = self.spec.input_shapes()
        if len(inputs) != len(expected):
            raise ShapeMismatchError(self.spec.label, f"{len(expected)} input(s)", f"{len(inputs)} input(s)")
        for tensor, shape in zip(inputs, expected):
            if tuple(tensor.shape[1:]) != shape:
                raise ShapeMismatchError(self.spec.label, shape, tuple(tensor.shape[1:]))
        return self.module(*inputs)


def forward(layer: Layer, *inputs: torch.Tensor) -> torch.Tensor:
    """Checked forward call of one layer"""
    return layer(*inputs)


class LayerStack(nn.Module):
    """Sequential single-input layers whose declared shapes chain"""

    def __init__(self, specs: Sequence[LayerSpec]):
        super().__init__()
        if not specs:
            raise ValidationError("LayerStack needs at least one layer", field='specs')
        for previous, current in zip(specs, specs[1:]):
            if current.kind in MULTI_INPUT_KINDS:
                raise ValidationError(f"{current.kind} cannot sit inside a LayerStack", field='specs')
            if tuple(current.input_shape) != previous.output_shape:
                raise ShapeMismatchError(current.label, previous.output_shape, tuple(current.input_shape))
        self.layers = nn.ModuleList(Layer(spec) for spec in specs)

    @classmethod
    def build(cls, input_shape: Shape, layers: Iterable[Tuple[str, Dict[str, Any]]], prefix: str = '') -> 'LayerStack':
        """Declare layers by (kind, params); input shapes follow from the previous output"""
        specs: List[LayerSpec] = []
        shape = tuple(input_shape)
        for index, (kind, params) in enumerate(layers):
            spec = LayerSpec(kind, shape, dict(params), name=f"{prefix}{index}:{kind}")
            specs.append(spec)
            shape = spec.output_shape
        return cls(specs)

    @property
    def input_shape(self) -> Shape:
        return tuple(self.layers[0].spec.input_shape)

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].out_shape

    def parametric_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if any(True for _ in layer.parameters())]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


# ============== Gradients ==============

def backward(
    output: torch.Tensor,
    parameters: Dict[str, torch.Tensor],
    inputs: Optional[Dict[str, torch.Tensor]] = None,
    output_grad: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of output with respect to named parameters and inputs

    Tensors the output does not depend on get zero gradients.

    Raises:
        GraphError: the output carries no autograd graph
    """
    if output.grad_fn is None and not output.requires_grad:
        raise GraphError("Output has no autograd graph; run a forward pass with gradients enabled")
    targets = dict(parameters)
    targets.update(inputs or {})
    names = [name for name, tensor in targets.items() if tensor.requires_grad]
    if output_grad is None:
        output_grad = torch.ones_like(output)
    grads = torch.autograd.grad(
        outputs=output,
        inputs=[targets[name] for name in names],
        grad_outputs=output_grad,
        retain_graph=True,
        allow_unused=True,
    ) if names else ()
    result = {name: torch.zeros_like(tensor) for name, tensor in targets.items()}
    for name, grad in zip(names, grads):
        if grad is not None:
            result[name] = grad
    return result


def gradient_check(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor,
                   eps: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Compare autograd against central differences in float64"""
    inputs = tuple(x.detach().to(torch.float64).requires_grad_(True) for x in inputs)
    return torch.autograd.gradcheck(fn, inputs, eps=eps, atol=atol, rtol=rtol)


# ============== Optimizer ==============

@dataclass
class AdamState:
    """Adam hyperparameters with torch-held moment buffers"""
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    optimizer: Optional[torch.optim.Adam] = None
    names: Dict[int, str] = field(default_factory=dict)

    @classmethod
    def create(cls, parameters: Dict[str, torch.nn.Parameter], learning_rate: float = 1e-4,
               beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> 'AdamState':
        trainable = {name: p for name, p in parameters.items() if p.requires_grad}
        if not trainable:
            raise TrainingError("No trainable parameters")
        optimizer = torch.optim.Adam(list(trainable.values()), lr=learning_rate,
                                     betas=(beta1, beta2), eps=epsilon)
        return cls(learning_rate, beta1, beta2, epsilon, 0, optimizer,
                   {id(p): name for name, p in trainable.items()})

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)

    def moments(self, parameter: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state[parameter]
        return state['exp_avg'], state['exp_avg_sq']


def adam_step(state: AdamState) -> AdamState:
    """One bias-corrected Adam update of every parameter that has a gradient"""
    for group in state.optimizer.param_groups:
        for parameter in group['params']:
            if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
                raise TrainingError(
                    "Non-finite gradient",
                    parameter=state.names.get(id(parameter), '<unnamed>')
                )
    state.optimizer.step()
    state.step_count += 1
    return state


# ============== Losses ==============

def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError('mse_loss', tuple(target.shape), tuple(pred.shape))
    return torch.mean((pred - target) ** 2)


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims and averaged over the batch"""
    if mu.shape != logvar.shape:
        raise ShapeMismatchError('kl_standard_normal', tuple(mu.shape), tuple(logvar.shape))
    terms = 1.0 + logvar - mu ** 2 - torch.exp(logvar)
    return -0.5 * torch.mean(torch.sum(terms.flatten(1), dim=1))


# ============== Initialization ==============

def init_weights(model: nn.Module) -> nn.Module:
    """Kaiming-uniform for ReLU-fed layers, Xavier-uniform for linear outputs, zero bias"""
    for layer in model.modules():
        if not isinstance(layer, Layer):
            continue
        inner = layer.module
        if not isinstance(inner, (nn.Linear, nn.Conv2d, nn.Conv3d)):
            continue
        if layer.is_linear_output:
            nn.init.xavier_uniform_(inner.weight)
        else:
            nn.init.kaiming_uniform_(inner.weight, nonlinearity='relu')
        nn.init.zeros_(inner.bias)
    return model


def seed_everything(seed: int, single_thread: bool = True) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator for sampling layers"""
    os.environ['PYTHONHASHSEED'] = str(seed)
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if single_thread:
        torch.set_num_threads(1)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def named_tensors(model: nn.Module) -> Dict[str, np.ndarray]:
    """Parameters as float32 numpy arrays in registration order"""
    return {name: p.detach().cpu().numpy().astype(np.float32) for name, p in model.named_parameters()}
