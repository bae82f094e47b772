"""
Executable layer graphs.

A Graph is an ordered list of Nodes; each node names the nodes it reads
from, so the stored order is also the evaluation order. Graphs are built
with a GraphBuilder and are not modified afterwards, apart from parameter
values being replaced by the optimizer.
"""
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from . import ops
from .tensor import Tensor, current_tape
from .utils import GraphError

LAYER_KINDS = (
    "input",
    "conv",
    "sepconv",
    "bn",
    "relu",
    "dropout",
    "pad",
    "maxpool",
    "blurpool",
    "resize",
    "gap",
    "concat",
)


class Node:
    def __init__(self, name, kind, inputs, in_channels, out_channels, attrs=None, params=None):
        if kind not in LAYER_KINDS:
            raise GraphError("Unknown layer kind {!r} for node {}".format(kind, name))
        self.name = name
        self.kind = kind
        self.inputs = tuple(inputs)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.attrs = dict(attrs or {})
        self.params = OrderedDict(params or {})

    @property
    def size_from(self):
        return self.attrs.get("size_from")

    def __repr__(self):
        return "<Node {} {} {}->{}>".format(
            self.name, self.kind, self.in_channels, self.out_channels
        )


class EvalContext:
    """
    Per-evaluation state: the dropout random stream and whether dropout is
    active. ``dropout_p`` overrides every dropout node's rate when set.
    """

    def __init__(self, rng=None, dropout=True, dropout_p=None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dropout = dropout
        self.dropout_p = dropout_p


def _forward_conv(node, args, ctx):
    return ops.conv2d(args[0], node.params["weight"], node.params.get("bias"), node.attrs["spec"])


def _forward_sepconv(node, args, ctx):
    p = node.params
    return ops.separable_conv3x3(args[0], p["w_1x3"], p["w_3x1"], p["w_pointwise"])


def _forward_bn(node, args, ctx):
    return ops.batchnorm2d(args[0], node.params["gamma"], node.params["beta"])


def _forward_dropout(node, args, ctx):
    p = node.attrs["p"] if ctx.dropout_p is None else ctx.dropout_p
    return ops.dropout2d(args[0], p, ctx.rng, active=ctx.dropout)


def _forward_pad(node, args, ctx):
    top, bottom, left, right = node.attrs["padding"]
    return ops.pad_replicate(args[0], top, bottom, left, right)


LAYER_FORWARD = {
    "conv": _forward_conv,
    "sepconv": _forward_sepconv,
    "bn": _forward_bn,
    "relu": lambda node, args, ctx: ops.relu(args[0]),
    "dropout": _forward_dropout,
    "pad": _forward_pad,
    "maxpool": lambda node, args, ctx: ops.maxpool2x2_s1(args[0]),
    "blurpool": lambda node, args, ctx: ops.blurpool2x2_s2(args[0]),
    "gap": lambda node, args, ctx: ops.global_avg_pool(args[0]),
    "concat": lambda node, args, ctx: ops.concat_channels(args),
}


def _shape_conv(node, shapes, ins):
    n, _, h, w = ins[0]
    return (n, node.out_channels) + node.attrs["spec"].output_hw(h, w)


def _shape_same(node, shapes, ins):
    n, _, h, w = ins[0]
    return (n, node.out_channels, h, w)


def _shape_pad(node, shapes, ins):
    n, c, h, w = ins[0]
    top, bottom, left, right = node.attrs["padding"]
    return (n, c, h + top + bottom, w + left + right)


def _shape_resize(node, shapes, ins):
    n, c = ins[0][:2]
    if node.size_from is not None:
        return (n, c) + tuple(shapes[node.size_from][2:])
    return (n, c) + tuple(node.attrs["size"])


def _shape_concat(node, shapes, ins):
    n, _, h, w = ins[0]
    return (n, sum(s[1] for s in ins), h, w)


LAYER_SHAPES = {
    "conv": _shape_conv,
    "sepconv": _shape_same,
    "bn": _shape_same,
    "relu": _shape_same,
    "dropout": _shape_same,
    "pad": _shape_pad,
    "maxpool": lambda node, shapes, ins: ins[0][:2] + (ins[0][2] - 1, ins[0][3] - 1),
    "blurpool": lambda node, shapes, ins: ins[0][:2] + (ins[0][2] // 2, ins[0][3] // 2),
    "resize": _shape_resize,
    "gap": lambda node, shapes, ins: ins[0][:2] + (1, 1),
    "concat": _shape_concat,
}


class Graph:
    def __init__(self, nodes, output, config=None):
        self.nodes = tuple(nodes)
        self._by_name = OrderedDict((node.name, node) for node in self.nodes)
        if len(self._by_name) != len(self.nodes):
            raise GraphError("Graph has duplicate node names")
        self.output = output
        self.config = config
        self.validate()
        self._release = self._release_schedule()

    @property
    def input_node(self):
        return self.nodes[0]

    @property
    def input_channels(self):
        return self.input_node.out_channels

    @property
    def output_channels(self):
        return self._by_name[self.output].out_channels

    def node(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError("No node named {!r}".format(name))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def validate(self):
        "Check ordering and channel arithmetic at every node"
        problems = []
        if not self.nodes or self.nodes[0].kind != "input":
            raise GraphError("Graph must start with its input node")
        if self.output not in self._by_name:
            raise GraphError("Graph output {!r} is not a node".format(self.output))
        seen = {}
        for node in self.nodes:
            refs = list(node.inputs) + ([node.size_from] if node.size_from else [])
            for ref in refs:
                if ref not in seen:
                    problems.append(
                        "{} reads {} which does not precede it".format(node.name, ref)
                    )
            if node.kind != "input":
                incoming = sum(seen[ref].out_channels for ref in node.inputs if ref in seen)
                if incoming != node.in_channels:
                    problems.append(
                        "{} declares {} input channels, incoming edges carry {}".format(
                            node.name, node.in_channels, incoming
                        )
                    )
            spec = node.attrs.get("spec")
            if spec is not None and (
                spec.in_channels != node.in_channels or spec.out_channels != node.out_channels
            ):
                problems.append("{} conv spec disagrees with node channels".format(node.name))
            seen[node.name] = node
        if problems:
            raise GraphError("Invalid graph:\n" + "\n".join("  - " + p for p in problems))

    def _release_schedule(self):
        # name -> index of the last node that reads it
        last_use = {}
        for index, node in enumerate(self.nodes):
            for ref in list(node.inputs) + ([node.size_from] if node.size_from else []):
                last_use[ref] = index
        schedule = [[] for _ in self.nodes]
        for name, index in last_use.items():
            if name != self.output:
                schedule[index].append(name)
        return schedule

    def parameters(self):
        "Ordered mapping of ``node.param`` to parameter Tensor"
        params = OrderedDict()
        for node in self.nodes:
            for pname, tensor in node.params.items():
                params["{}.{}".format(node.name, pname)] = tensor
        return params

    @property
    def dtype(self):
        for tensor in self.parameters().values():
            return tensor.dtype
        return np.dtype(np.float64)

    def num_parameters(self):
        return sum(t.size for t in self.parameters().values())

    def state_dict(self):
        return OrderedDict((name, t.data.copy()) for name, t in self.parameters().items())

    def load_state_dict(self, state):
        params = self.parameters()
        missing = [name for name in params if name not in state]
        unexpected = [name for name in state if name not in params]
        if missing or unexpected:
            raise GraphError(
                "State does not match graph: missing {}, unexpected {}".format(
                    missing[:5], unexpected[:5]
                )
            )
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise GraphError(
                    "Parameter {} has shape {}, state holds {}".format(
                        name, tensor.shape, value.shape
                    )
                )
            tensor.data = value.astype(tensor.dtype)

    def astype(self, dtype):
        for tensor in self.parameters().values():
            tensor.data = tensor.data.astype(dtype)
        return self

    def infer_shapes(self, input_shape):
        "Output shape of every node for an N x C x H x W input"
        input_shape = tuple(int(v) for v in input_shape)
        if len(input_shape) != 4 or input_shape[1] != self.input_channels:
            raise GraphError(
                "Input shape {} does not match graph input of {} channels".format(
                    input_shape, self.input_channels
                )
            )
        shapes = OrderedDict()
        shapes[self.input_node.name] = input_shape
        for node in self.nodes[1:]:
            ins = [shapes[ref] for ref in node.inputs]
            if node.kind == "concat" and len({s[2:] for s in ins}) > 1:
                raise GraphError(
                    "{} concatenates mismatched spatial sizes {}".format(node.name, ins)
                )
            shape = LAYER_SHAPES[node.kind](node, shapes, ins)
            if min(shape) < 1:
                raise GraphError(
                    "{} produces empty shape {} for input {}".format(node.name, shape, input_shape)
                )
            shapes[node.name] = shape
        return shapes

    def forward(self, input, context=None):
        "Evaluate the graph and return the output (logits) tensor"
        context = context or EvalContext()
        if not isinstance(input, Tensor):
            input = Tensor(np.asarray(input))
        release = current_tape() is None
        env = {self.input_node.name: input}
        for index, node in enumerate(self.nodes[1:], 1):
            args = [env[ref] for ref in node.inputs]
            if node.kind == "resize":
                if node.size_from is not None:
                    h, w = env[node.size_from].shape[2:]
                else:
                    h, w = node.attrs["size"]
                env[node.name] = ops.bilinear_resize(args[0], h, w)
            else:
                env[node.name] = LAYER_FORWARD[node.kind](node, args, context)
            if release:
                for name in self._release[index]:
                    env.pop(name, None)
        return env[self.output]


class GraphBuilder:
    """
    Incrementally assembles a Graph. Each helper appends one node reading
    from named nodes and returns the new node's name.
    """

    def __init__(self, input_channels, dtype=np.float64):
        self.dtype = dtype
        self.nodes = []
        self._channels = {}
        self._scope = []
        self.input = self._add(Node("input", "input", (), 0, int(input_channels)))

    def _add(self, node):
        if node.name in self._channels:
            raise GraphError("Duplicate node name {}".format(node.name))
        self.nodes.append(node)
        self._channels[node.name] = node.out_channels
        return node.name

    def channels(self, name):
        return self._channels[name]

    @contextmanager
    def scope(self, name):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def _name(self, base):
        name = ".".join(self._scope + [base])
        candidate, i = name, 1
        while candidate in self._channels:
            candidate = "{}_{}".format(name, i)
            i += 1
        return candidate

    def _param(self, shape, fill=0.0):
        return Tensor(np.full(shape, fill, dtype=self.dtype), requires_grad=True)

    def add(self, kind, inputs, out_channels=None, attrs=None, params=None, name=None):
        if isinstance(inputs, str):
            inputs = [inputs]
        in_channels = sum(self._channels[ref] for ref in inputs)
        if out_channels is None:
            out_channels = in_channels
        node = Node(
            self._name(name or kind), kind, inputs, in_channels, out_channels, attrs, params
        )
        for pname, tensor in node.params.items():
            tensor.name = "{}.{}".format(node.name, pname)
        return self._add(node)

    def conv(self, x, spec, name=None):
        params = OrderedDict(weight=self._param(spec.weight_shape))
        if spec.has_bias:
            params["bias"] = self._param((spec.out_channels,))
        return self.add("conv", x, spec.out_channels, {"spec": spec}, params, name=name)

    def sepconv(self, x, out_channels):
        c = self._channels[x]
        params = OrderedDict(
            w_1x3=self._param((c, 1, 1, 3)),
            w_3x1=self._param((c, 1, 3, 1)),
            w_pointwise=self._param((out_channels, c, 1, 1)),
        )
        return self.add("sepconv", x, out_channels, params=params)

    def bn(self, x):
        c = self._channels[x]
        params = OrderedDict(gamma=self._param((c,), 1.0), beta=self._param((c,)))
        return self.add("bn", x, params=params)

    def relu(self, x):
        return self.add("relu", x)

    def dropout(self, x, p):
        return self.add("dropout", x, attrs={"p": float(p)})

    def pad(self, x, top=0, bottom=0, left=0, right=0):
        return self.add("pad", x, attrs={"padding": (top, bottom, left, right)})

    def maxpool(self, x):
        return self.add("maxpool", x)

    def blurpool(self, x):
        return self.add("blurpool", x)

    def resize(self, x, size_from=None, size=None):
        if (size_from is None) == (size is None):
            raise GraphError("resize needs exactly one of size_from or size")
        attrs = {"size_from": size_from} if size_from is not None else {"size": tuple(size)}
        return self.add("resize", x, attrs=attrs)

    def gap(self, x):
        return self.add("gap", x)

    def concat(self, xs):
        xs = list(xs)
        if len(xs) == 1:
            return xs[0]
        return self.add("concat", xs)

    def build(self, output, config=None):
        return Graph(self.nodes, output, config=config)
