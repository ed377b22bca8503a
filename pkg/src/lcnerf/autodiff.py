"""A small reverse-mode network: declarative layer graphs, manual backprop and Adam.

A :class:`LayerGraphSpec` is an ordered list of nodes. Every node reads from
the node before it unless it names its ``source`` explicitly; ``Concat``
names all of its sources. The last node is the network output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import ClassVar, Union

import numpy as np

from .errors import SpecError, StateError, DomainError


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True
    group: str = "mlp"

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        # in place: tables hand out views into shared buffers
        self.grad[...] = 0


# -- node kinds ---------------------------------------------------------------

@dataclass(frozen=True)
class Input:
    tag: str
    width: int
    kind: ClassVar[str] = "input"

    @property
    def name(self) -> str:
        return self.tag


@dataclass(frozen=True)
class Linear:
    in_width: int
    out_width: int
    bias: bool = True
    source: str | None = None
    name: str | None = None
    kind: ClassVar[str] = "linear"


@dataclass(frozen=True)
class ReLU:
    source: str | None = None
    name: str | None = None
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class Conv1d:
    """1-D convolution over a flat feature row.

    ``layout="channels"``: the row is ``in_ch`` channels of length 1, zero
    padded on both sides so an odd kernel yields one output position.
    ``layout="sequence"``: the row is ``in_ch`` channels by ``width // in_ch``
    positions, valid padding.
    """

    in_ch: int
    out_ch: int
    kernel: int
    bias: bool = True
    layout: str = "channels"
    source: str | None = None
    name: str | None = None
    kind: ClassVar[str] = "conv1d"


@dataclass(frozen=True)
class Concat:
    sources: tuple[str, ...]
    name: str | None = None
    kind: ClassVar[str] = "concat"

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))


Node = Union[Input, Linear, ReLU, Conv1d, Concat]
_KINDS = {cls.kind: cls for cls in (Input, Linear, ReLU, Conv1d, Concat)}


@dataclass(frozen=True)
class _Step:
    name: str
    node: Node
    sources: tuple[str, ...]
    in_width: int
    out_width: int


@dataclass(frozen=True)
class LayerGraphSpec:
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    # serialization ---------------------------------------------------------
    def to_list(self) -> list[dict]:
        out = []
        for node in self.nodes:
            d = {"kind": node.kind}
            d.update({k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(node).items() if v is not None})
            out.append(d)
        return out

    @classmethod
    def from_list(cls, items) -> "LayerGraphSpec":
        nodes = []
        for item in items:
            item = dict(item)
            kind = item.pop("kind", None)
            if kind not in _KINDS:
                raise SpecError(f"unknown node kind {kind!r}")
            try:
                nodes.append(_KINDS[kind](**item))
            except TypeError as exc:
                raise SpecError(f"bad {kind} node {item}: {exc}") from None
        return cls(tuple(nodes))

    # validation ------------------------------------------------------------
    def resolve(self) -> list[_Step]:
        """Validate the graph and return it with every source and width made explicit."""
        if not self.nodes:
            raise SpecError("empty layer graph")
        widths: dict[str, int] = {}
        steps: list[_Step] = []
        consumed: set[str] = set()
        prev = None
        for i, node in enumerate(self.nodes):
            name = node.name if node.name is not None else f"n{i}"
            if name in widths:
                raise SpecError(f"duplicate node name {name!r}")
            if isinstance(node, Input):
                if node.width < 1:
                    raise SpecError(f"input {name!r} needs a positive width")
                steps.append(_Step(name, node, (), 0, node.width))
                widths[name] = node.width
                prev = name
                continue
            if isinstance(node, Concat):
                sources = node.sources
                if len(sources) < 2:
                    raise SpecError(f"concat {name!r} needs at least two sources")
            else:
                sources = (node.source if node.source is not None else prev,)
            for s in sources:
                if s is None or s not in widths:
                    raise SpecError(
                        f"node {name!r} reads {s!r}, which is not an earlier node or input"
                    )
            in_width = sum(widths[s] for s in sources)
            out_width = _node_out_width(name, node, in_width)
            consumed.update(sources)
            steps.append(_Step(name, node, tuple(sources), in_width, out_width))
            widths[name] = out_width
            prev = name
        terminal = steps[-1]
        if isinstance(terminal.node, Input):
            raise SpecError("layer graph must end in a computation node")
        dangling = [s.name for s in steps[:-1]
                    if not isinstance(s.node, Input) and s.name not in consumed]
        if dangling:
            raise SpecError(f"graph has more than one terminal node: {dangling + [terminal.name]}")
        return steps

    @property
    def input_widths(self) -> dict[str, int]:
        return {n.tag: n.width for n in self.nodes if isinstance(n, Input)}

    @property
    def output_width(self) -> int:
        return self.resolve()[-1].out_width

    def param_count(self) -> int:
        total = 0
        for step in self.resolve():
            for shape in _param_shapes(step.node):
                total += int(np.prod(shape))
        return total


def _node_out_width(name: str, node: Node, in_width: int) -> int:
    if isinstance(node, Linear):
        if node.in_width != in_width:
            raise SpecError(
                f"linear {name!r} declares in_width {node.in_width} but its sources give {in_width}"
            )
        return node.out_width
    if isinstance(node, ReLU):
        return in_width
    if isinstance(node, Concat):
        return in_width
    if isinstance(node, Conv1d):
        if node.layout == "channels":
            if node.kernel % 2 == 0:
                raise SpecError(f"conv {name!r}: channels layout needs an odd kernel")
            if node.in_ch != in_width:
                raise SpecError(
                    f"conv {name!r} declares {node.in_ch} channels but its source is {in_width} wide"
                )
            return node.out_ch
        if node.layout == "sequence":
            if in_width % node.in_ch:
                raise SpecError(f"conv {name!r}: width {in_width} not divisible by {node.in_ch} channels")
            length = in_width // node.in_ch
            if length < node.kernel:
                raise SpecError(f"conv {name!r}: sequence length {length} shorter than kernel")
            return node.out_ch * (length - node.kernel + 1)
        raise SpecError(f"conv {name!r}: unknown layout {node.layout!r}")
    raise SpecError(f"unsupported node {node!r}")


def _param_shapes(node: Node) -> list[tuple[int, ...]]:
    if isinstance(node, Linear):
        shapes = [(node.out_width, node.in_width)]
        if node.bias:
            shapes.append((node.out_width,))
        return shapes
    if isinstance(node, Conv1d):
        shapes = [(node.out_ch, node.in_ch, node.kernel)]
        if node.bias:
            shapes.append((node.out_ch,))
        return shapes
    return []


# -- network ------------------------------------------------------------------

class Network:
    """Executable form of a :class:`LayerGraphSpec` with manual backprop."""

    def __init__(self, spec: LayerGraphSpec, rng=None, dtype=np.float64, prefix: str = ""):
        self.spec = spec
        self.steps = spec.resolve()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        self.params: list[ParamTensor] = []
        self._weights: dict[str, tuple[ParamTensor, ParamTensor | None]] = {}
        for step in self.steps:
            shapes = _param_shapes(step.node)
            if not shapes:
                continue
            w_shape = shapes[0]
            fan_in = int(np.prod(w_shape[1:]))
            bound = np.sqrt(6.0 / fan_in)  # kaiming-uniform, relu gain
            w = ParamTensor(f"{prefix}{step.name}.weight",
                            rng.uniform(-bound, bound, size=w_shape).astype(self.dtype))
            b = None
            if len(shapes) > 1:
                b = ParamTensor(f"{prefix}{step.name}.bias", np.zeros(shapes[1], dtype=self.dtype))
            self._weights[step.name] = (w, b)
            self.params.extend(p for p in (w, b) if p is not None)
        self._cache: dict[str, np.ndarray] | None = None

    @property
    def input_widths(self) -> dict[str, int]:
        return self.spec.input_widths

    @property
    def output_width(self) -> int:
        return self.steps[-1].out_width

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        acts: dict[str, np.ndarray] = {}
        batch = None
        for step in self.steps:
            node = step.node
            if isinstance(node, Input):
                if node.tag not in inputs:
                    raise DomainError(f"input tag {node.tag!r} is not bound")
                x = np.asarray(inputs[node.tag], dtype=self.dtype)
                if x.ndim != 2 or x.shape[1] != node.width:
                    raise DomainError(
                        f"input {node.tag!r} expects (B, {node.width}), got {x.shape}"
                    )
                if batch is not None and x.shape[0] != batch:
                    raise DomainError("inputs disagree on batch size")
                batch = x.shape[0]
                acts[step.name] = x
                continue
            if isinstance(node, Concat):
                acts[step.name] = np.concatenate([acts[s] for s in step.sources], axis=1)
                continue
            x = acts[step.sources[0]]
            if isinstance(node, ReLU):
                acts[step.name] = np.maximum(x, 0)
            elif isinstance(node, Linear):
                w, b = self._weights[step.name]
                y = x @ w.values.T
                if b is not None:
                    y += b.values
                acts[step.name] = y
            elif isinstance(node, Conv1d):
                acts[step.name] = self._conv_forward(step, x)
        self._cache = acts
        return acts[self.steps[-1].name]

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate parameter grads; return grads w.r.t. each bound input tag."""
        if self._cache is None:
            raise StateError("backward called before forward")
        acts = self._cache
        grads: dict[str, np.ndarray] = {self.steps[-1].name: np.asarray(upstream, dtype=self.dtype)}
        out: dict[str, np.ndarray] = {}

        def push(name, g):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g

        for step in reversed(self.steps):
            g = grads.pop(step.name, None)
            node = step.node
            if isinstance(node, Input):
                out[node.tag] = g if g is not None else np.zeros_like(acts[step.name])
                continue
            if g is None:
                continue
            if isinstance(node, Concat):
                offset = 0
                for s in step.sources:
                    width = acts[s].shape[1]
                    push(s, g[:, offset:offset + width])
                    offset += width
                continue
            x = acts[step.sources[0]]
            if isinstance(node, ReLU):
                push(step.sources[0], g * (x > 0))
            elif isinstance(node, Linear):
                w, b = self._weights[step.name]
                w.grad += g.T @ x
                if b is not None:
                    b.grad += g.sum(axis=0)
                push(step.sources[0], g @ w.values)
            elif isinstance(node, Conv1d):
                push(step.sources[0], self._conv_backward(step, x, g))
        return out

    # conv ------------------------------------------------------------------
    def _conv_forward(self, step: _Step, x: np.ndarray) -> np.ndarray:
        node: Conv1d = step.node
        w, b = self._weights[step.name]
        if node.layout == "channels":
            # length-1 signal, zero padded: only the centre tap touches data
            y = x @ w.values[:, :, node.kernel // 2].T
            if b is not None:
                y += b.values
            return y
        seq = x.reshape(x.shape[0], node.in_ch, -1)
        win = np.lib.stride_tricks.sliding_window_view(seq, node.kernel, axis=2)
        y = np.einsum("bilk,oik->bol", win, w.values, optimize=True)
        if b is not None:
            y += b.values[None, :, None]
        return y.reshape(x.shape[0], -1)

    def _conv_backward(self, step: _Step, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        node: Conv1d = step.node
        w, b = self._weights[step.name]
        k = node.kernel
        if node.layout == "channels":
            w.grad[:, :, k // 2] += g.T @ x
            if b is not None:
                b.grad += g.sum(axis=0)
            return g @ w.values[:, :, k // 2]
        batch = x.shape[0]
        seq = x.reshape(batch, node.in_ch, -1)
        length_out = seq.shape[2] - k + 1
        g3 = g.reshape(batch, node.out_ch, length_out)
        win = np.lib.stride_tricks.sliding_window_view(seq, k, axis=2)
        w.grad += np.einsum("bol,bilk->oik", g3, win, optimize=True)
        if b is not None:
            b.grad += g3.sum(axis=(0, 2))
        dx = np.zeros_like(seq)
        for j in range(k):
            dx[:, :, j:j + length_out] += np.einsum("bol,oi->bil", g3, w.values[:, :, j])
        return dx.reshape(batch, -1)


def build_net(spec: LayerGraphSpec, rng=None, dtype=np.float64, prefix: str = "") -> Network:
    return Network(spec, rng=rng, dtype=dtype, prefix=prefix)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_lr: dict[str, float] = field(default_factory=dict)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: list[ParamTensor]) -> None:
    """One bias-corrected Adam update in place, then zero every grad."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.values)
            state.v[p.name] = np.zeros_like(p.values)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        lr = state.group_lr.get(p.group, state.lr)
        p.values -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


def zero_grad(params: list[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()
