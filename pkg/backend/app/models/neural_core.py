"""
Differentiable building blocks for the multi-task network.

Tensors are float64 torch tensors and torch autograd records the graph.
This module pins down the op set the model is allowed to use (each op
checks shapes and raises ShapeMismatch), the LSTM cell and feedforward
layers with their initialization, the Adam step, gradient clipping and
the checkpoint format.

Parameter layout of an LSTM cell (serialization order = state_dict order):
    weight_ih  (4H, I)   rows [i | f | g | o]
    weight_hh  (4H, H)   rows [i | f | g | o]
    bias       (4H,)     forget block initialized to 1
"""

import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from ..core.errors import NonScalarLoss, ReportIoError, ShapeMismatch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
OP_SET_VERSION = 1


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def make_generator(seed: Optional[int]) -> Optional[torch.Generator]:
    if seed is None:
        return None
    return torch.Generator().manual_seed(int(seed))


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def _broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from e


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != inner_b:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast(a, b, "mul")
    return a * b


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.softplus(x)


def mean(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    if x.numel() == 0:
        raise ShapeMismatch("mean of an empty tensor")
    return x.mean() if dim is None else x.mean(dim=dim)


def sample_std(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    """Standard deviation with denominator n - 1."""
    n = x.numel() if dim is None else x.shape[dim]
    if n < 2:
        raise ShapeMismatch(f"sample_std needs at least 2 values, got {n}")
    return torch.std(x, dim=dim, correction=1)


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if not tensors:
        raise ShapeMismatch("concat of no tensors")
    first = tensors[0]
    for t in tensors[1:]:
        if t.dim() != first.dim() or any(
            s != f for i, (s, f) in enumerate(zip(t.shape, first.shape)) if i != dim % first.dim()
        ):
            raise ShapeMismatch(f"concat: {tuple(first.shape)} vs {tuple(t.shape)} along dim {dim}")
    return torch.cat(list(tensors), dim=dim)


def take(x: torch.Tensor, start: int, stop: int, dim: int = 0) -> torch.Tensor:
    """Slice [start, stop) along `dim`."""
    if not 0 <= start <= stop <= x.shape[dim]:
        raise ShapeMismatch(f"slice [{start}, {stop}) out of range for size {x.shape[dim]}")
    return x.narrow(dim, start, stop - start)


def dropout(
    x: torch.Tensor, p: float, training: bool, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p); identity unless training."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = torch.full(x.shape, 1.0 - p, dtype=x.dtype)
    mask = torch.bernoulli(keep, generator=generator)
    return x * mask / (1.0 - p)


def backward(loss: torch.Tensor) -> None:
    """Populate .grad of every leaf the loss depends on."""
    if loss.numel() != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _uniform_fan_in(weight: torch.Tensor, generator: Optional[torch.Generator]) -> None:
    bound = 1.0 / math.sqrt(weight.shape[1])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)


class LstmCell(nn.Module):
    """One LSTM layer applied to a single time step."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight_ih = nn.Parameter(torch.empty(4 * hidden_size, input_size, dtype=DTYPE))
        self.weight_hh = nn.Parameter(torch.empty(4 * hidden_size, hidden_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(4 * hidden_size, dtype=DTYPE))
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        H = self.hidden_size
        _uniform_fan_in(self.weight_ih, generator)
        _uniform_fan_in(self.weight_hh, generator)
        with torch.no_grad():
            self.bias.zero_()
            self.bias[H:2 * H] = 1.0

    def forward(
        self, x: torch.Tensor, h: torch.Tensor, c: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        gates = add(add(matmul(x, self.weight_ih.t()), matmul(h, self.weight_hh.t())), self.bias)
        i, f, g, o = gates.chunk(4, dim=-1)
        i, f, g, o = sigmoid(i), sigmoid(f), tanh(g), sigmoid(o)
        c_next = add(mul(f, c), mul(i, g))
        h_next = mul(o, tanh(c_next))
        return h_next, c_next


def lstm_step(
    cell: LstmCell, x_t: torch.Tensor, h_prev: torch.Tensor, c_prev: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(h_t, c_t) for one step; inputs are (..., input_size) and (..., hidden_size)."""
    if x_t.shape[-1] != cell.input_size:
        raise ShapeMismatch(f"lstm_step: input width {x_t.shape[-1]} != {cell.input_size}")
    if h_prev.shape != c_prev.shape or h_prev.shape[-1] != cell.hidden_size:
        raise ShapeMismatch(
            f"lstm_step: state shapes {tuple(h_prev.shape)}, {tuple(c_prev.shape)} for hidden {cell.hidden_size}"
        )
    return cell(x_t, h_prev, c_prev)


class StackedLstm(nn.Module):
    """Stacked LSTM layers with dropout between layers; returns the last top-layer hidden state."""

    def __init__(self, input_size: int, hidden_size: int, n_layers: int, dropout_rate: float = 0.0):
        super().__init__()
        self.hidden_size = hidden_size
        self.dropout_rate = dropout_rate
        self.cells = nn.ModuleList(
            [LstmCell(input_size if k == 0 else hidden_size, hidden_size) for k in range(n_layers)]
        )

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for cell in self.cells:
            cell.reset_parameters(generator)

    def forward(self, windows: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        # windows: [batch, steps, features]
        if windows.dim() != 3:
            raise ShapeMismatch(f"StackedLstm expects [batch, steps, features], got {tuple(windows.shape)}")
        batch, steps, _ = windows.shape
        zeros = torch.zeros(batch, self.hidden_size, dtype=DTYPE)
        state = [(zeros, zeros) for _ in self.cells]
        top = zeros
        for t in range(steps):
            x = windows[:, t, :]
            for k, cell in enumerate(self.cells):
                if k > 0:
                    x = dropout(x, self.dropout_rate, self.training, generator)
                h, c = lstm_step(cell, x, *state[k])
                state[k] = (h, c)
                x = h
            top = x
        return top


ACTIVATIONS = {"tanh": tanh, "softplus": softplus, "identity": lambda x: x}


class Fnn(nn.Module):
    """
    Feedforward head: n_layers tanh hidden layers (dropout after each),
    then a linear map to one output and the output activation.
    """

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        n_layers: int,
        dropout_rate: float = 0.0,
        activation: str = "identity",
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.activation = activation
        self.dropout_rate = dropout_rate
        sizes = [input_size] + [hidden_size] * n_layers
        self.hidden = nn.ModuleList(
            [nn.Linear(sizes[k], sizes[k + 1], dtype=DTYPE) for k in range(n_layers)]
        )
        self.out = nn.Linear(sizes[-1], 1, dtype=DTYPE)
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for layer in list(self.hidden) + [self.out]:
            _uniform_fan_in(layer.weight, generator)
            with torch.no_grad():
                layer.bias.zero_()

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        for layer in self.hidden:
            x = tanh(add(matmul(x, layer.weight.t()), layer.bias))
            x = dropout(x, self.dropout_rate, self.training, generator)
        y = add(matmul(x, self.out.weight.t()), self.out.bias)
        return ACTIVATIONS[self.activation](y.squeeze(-1))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def make_optimizer(
    params: Iterable[nn.Parameter],
    lr: float = 1e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Adam) -> None:
    """One bias-corrected Adam update from the current .grad values."""
    optimizer.step()


def clip_grad_norm(params: Iterable[nn.Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most max_norm; returns the norm before clipping."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_header(model: nn.Module, seed: Optional[int], config: Optional[Dict] = None) -> Dict:
    return {
        "op_set_version": OP_SET_VERSION,
        "seed": seed,
        "shapes": {name: list(t.shape) for name, t in model.state_dict().items()},
        "config": config or {},
    }


def save_checkpoint(
    path: Union[str, Path], model: nn.Module, seed: Optional[int] = None, config: Optional[Dict] = None
) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"header": checkpoint_header(model, seed, config), "state_dict": model.state_dict()}, path)
    except OSError as e:
        raise ReportIoError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: Union[str, Path], model: nn.Module) -> Dict:
    """Restore parameters in place; returns the header."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu")
    except (OSError, RuntimeError) as e:
        raise ReportIoError(f"cannot read checkpoint {path}: {e}") from e
    header = payload["header"]
    if header.get("op_set_version") != OP_SET_VERSION:
        raise ReportIoError(f"{path}: op set version {header.get('op_set_version')} != {OP_SET_VERSION}")
    expected = checkpoint_header(model, None)["shapes"]
    if header["shapes"] != expected:
        mismatched: List[str] = [k for k in expected if header["shapes"].get(k) != expected[k]]
        raise ShapeMismatch(f"{path}: checkpoint shapes differ for {mismatched or list(header['shapes'])}")
    model.load_state_dict(payload["state_dict"])
    return header
