"""
U-Net backbone with bridge heads, stored as an ordered node list.

The graph is a list of LayerNode records evaluated in order; each node names
its input nodes, so skip edges are explicit in the topology. A backbone ends
at the "features" node; every bridge appends two basic blocks and a linear
1x1 convolution reading from it, so several heads share one backbone.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..dualct_error import ConfigurationError, ShapeError
from .layers import BatchNormState, avg_pool2, batch_norm, concat_skip, conv2d, relu, unpool2
from .tensor import Parameter, Tensor, backward_many

FEATURES = "features"
INPUT = "input"


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str  # input | conv | bn | relu | pool | unpool | concat | features | bridge-out
    inputs: Tuple[str, ...] = ()
    params: Tuple[str, ...] = ()


@dataclass
class NetworkGraph:
    in_channels: int
    base_channels: int
    depth: int
    dtype: type = np.float32
    nodes: List[LayerNode] = field(default_factory=list)
    params: Dict[str, Parameter] = field(default_factory=dict)
    bn_states: Dict[str, BatchNormState] = field(default_factory=dict)
    skip_edges: List[Tuple[str, str]] = field(default_factory=list)
    heads: Dict[str, int] = field(default_factory=dict)
    rng: object = field(default=None, repr=False)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def parameters(self) -> Dict[str, Parameter]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def node(self, node_id: str) -> LayerNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)


class _Builder:
    def __init__(self, net: NetworkGraph, rng):
        self.net = net
        self.rng = rng

    def _add(self, node: LayerNode) -> str:
        self.net.nodes.append(node)
        return node.id

    def _param(self, name, values):
        self.net.params[name] = Parameter(values, name=name, dtype=self.net.dtype)
        return name

    def conv(self, node_id, src, in_ch, out_ch, k) -> str:
        # He-uniform
        bound = math.sqrt(6.0 / (in_ch * k * k))
        w = self._param(f"{node_id}.weight", self.rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)))
        b = self._param(f"{node_id}.bias", np.zeros(out_ch))
        return self._add(LayerNode(node_id, "conv", (src,), (w, b)))

    def block(self, prefix, src, in_ch, out_ch) -> str:
        """conv3x3 -> batch norm -> ReLU"""
        conv = self.conv(f"{prefix}.conv", src, in_ch, out_ch, 3)
        gamma = self._param(f"{prefix}.bn.gamma", np.ones(out_ch))
        beta = self._param(f"{prefix}.bn.beta", np.zeros(out_ch))
        self.net.bn_states[f"{prefix}.bn"] = BatchNormState.fresh(out_ch, self.net.dtype)
        bn = self._add(LayerNode(f"{prefix}.bn", "bn", (conv,), (gamma, beta)))
        return self._add(LayerNode(f"{prefix}.relu", "relu", (bn,)))


def build_backbone(base_channels: int, depth: int, in_channels: int = 1, rng=None, dtype=np.float32) -> NetworkGraph:
    if not isinstance(depth, (int, np.integer)) or depth < 1:
        raise ConfigurationError(f"Backbone depth must be a positive integer, got {depth}")
    if base_channels < 1 or in_channels < 1:
        raise ConfigurationError(f"Channel counts must be positive, got base={base_channels} in={in_channels}")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = NetworkGraph(in_channels=in_channels, base_channels=base_channels, depth=depth, dtype=dtype, rng=rng)
    b = _Builder(net, rng)

    src = b._add(LayerNode(INPUT, "input"))
    in_ch = in_channels
    encoders = []
    for level in range(depth):
        ch = net.channels(level)
        if level > 0:
            src = b._add(LayerNode(f"enc{level}.pool", "pool", (src,)))
        src = b.block(f"enc{level}.block0", src, in_ch, ch)
        src = b.block(f"enc{level}.block1", src, ch, ch)
        encoders.append(src)
        in_ch = ch

    bottom = depth - 1
    src = b.block(f"dec{bottom}.block0", src, net.channels(bottom), net.channels(bottom))
    src = b.block(f"dec{bottom}.block1", src, net.channels(bottom), net.channels(bottom))
    for level in range(depth - 2, -1, -1):
        ch = net.channels(level)
        src = b._add(LayerNode(f"dec{level}.unpool", "unpool", (src,)))
        src = b.block(f"dec{level}.up", src, net.channels(level + 1), ch)
        src = b._add(LayerNode(f"dec{level}.concat", "concat", (encoders[level], src)))
        net.skip_edges.append((encoders[level], f"dec{level}.concat"))
        src = b.block(f"dec{level}.block0", src, 2 * ch, ch)
        src = b.block(f"dec{level}.block1", src, ch, ch)

    b._add(LayerNode(FEATURES, "features", (src,)))
    return net


def attach_bridge(net: NetworkGraph, out_channels: int, name: str = "out", rng=None) -> NetworkGraph:
    if not any(node.kind == "features" for node in net.nodes):
        raise ConfigurationError("Bridges attach to a backbone")
    if name in net.heads or name in (INPUT, FEATURES):
        raise ConfigurationError(f"Head '{name}' already exists")
    if out_channels < 1:
        raise ConfigurationError(f"Bridge needs at least one output channel, got {out_channels}")
    rng = rng if rng is not None else net.rng
    b = _Builder(net, rng)
    width = net.channels(0)
    src = b.block(f"{name}.block0", FEATURES, width, width)
    src = b.block(f"{name}.block1", src, width, width)
    src = b.conv(f"{name}.linear", src, width, out_channels, 1)
    b._add(LayerNode(name, "bridge-out", (src,)))
    net.heads[name] = out_channels
    return net


def _needed(net: NetworkGraph, targets: Sequence[str]):
    inputs = {node.id: node.inputs for node in net.nodes}
    needed, stack = set(), list(targets)
    while stack:
        node_id = stack.pop()
        if node_id in needed:
            continue
        needed.add(node_id)
        stack.extend(inputs[node_id])
    return needed


def forward(net: NetworkGraph, x, mode: str = "train", heads: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
    """
    Evaluates the graph and returns {head name: output}, plus the backbone
    output under "features". Only the requested heads are computed.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x, requires_grad=False, dtype=net.dtype)
    if x.values.ndim != 4 or x.shape[1] != net.in_channels:
        raise ShapeError(f"Network expects (N, {net.in_channels}, H, W), got {x.shape}")
    m = net.size_multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(f"Spatial dims {x.shape[2:]} must be divisible by {m}")
    heads = list(net.heads) if heads is None else list(heads)
    for head in heads:
        if head not in net.heads:
            raise ConfigurationError(f"Unknown head '{head}'")
    needed = _needed(net, heads + [FEATURES])

    values: Dict[str, Tensor] = {}
    for node in net.nodes:
        if node.id not in needed:
            continue
        args = [values[i] for i in node.inputs]
        params = [net.params[p] for p in node.params]
        if node.kind == "input":
            out = x
        elif node.kind == "conv":
            out = conv2d(args[0], *params)
        elif node.kind == "bn":
            out = batch_norm(args[0], params[0], params[1], net.bn_states[node.id], mode)
        elif node.kind == "relu":
            out = relu(args[0])
        elif node.kind == "pool":
            out = avg_pool2(args[0])
        elif node.kind == "unpool":
            out = unpool2(args[0])
        elif node.kind == "concat":
            out = concat_skip(args[0], args[1])
        else:
            out = args[0]
        values[node.id] = out
    return {name: values[name] for name in heads + [FEATURES]}


def backward(net: NetworkGraph, outputs: Dict[str, Tensor], output_grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Accumulates parameter gradients for the given output gradients and returns them by name."""
    backward_many([(outputs[name], grad) for name, grad in output_grads.items()])
    return {name: p.grad if p.grad is not None else np.zeros_like(p.values) for name, p in net.params.items()}


def state_arrays(net: NetworkGraph) -> Dict[str, np.ndarray]:
    """Parameters and batch norm running statistics by name, in graph order."""
    arrays = {name: p.values for name, p in net.params.items()}
    for name, state in net.bn_states.items():
        arrays[f"{name}.running_mean"] = state.running_mean
        arrays[f"{name}.running_var"] = state.running_var
    return arrays


def load_state_arrays(net: NetworkGraph, arrays: Dict[str, np.ndarray]):
    expected = state_arrays(net)
    missing = set(expected) - set(arrays)
    if missing:
        raise ConfigurationError(f"Checkpoint is missing {len(missing)} arrays, e.g. {sorted(missing)[0]}")
    for name, current in expected.items():
        values = np.asarray(arrays[name])
        if values.shape != current.shape:
            raise ShapeError(f"Checkpoint array {name} has shape {values.shape}, expected {current.shape}")
        current[...] = values
