"""
Analytic parameter and multiply-accumulate (MAC) counts.

One MAC is one multiply-accumulate. BN is counted in its inference form
(scale and shift, 2 MACs per element), bilinear resizing as 4 MACs per
output element and the blur as a 2x2 depthwise convolution. Pooling,
ReLU, dropout and concatenation cost nothing.
"""
import collections
import csv
import io
import os

import jinja2

from .utils import InvalidArgument

CostRow = collections.namedtuple("CostRow", ("name", "kind", "out_shape", "params", "macs"))

REPORT_FORMATS = ("text", "csv")

templates_root = os.path.join(os.path.dirname(__file__), "templates")


class CostReport:
    def __init__(self, rows, input_shape, samples=1):
        if samples < 1:
            raise InvalidArgument("samples must be a positive integer, got {}".format(samples))
        self.rows = list(rows)
        self.input_shape = tuple(input_shape)
        self.samples = int(samples)

    @property
    def total_params(self):
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self):
        return self.samples * sum(row.macs for row in self.rows)

    def __repr__(self):
        return "<CostReport {} rows params={} macs={} S={}>".format(
            len(self.rows), self.total_params, self.total_macs, self.samples
        )


def node_params(node):
    "Trainable parameter count of one node, from its geometry alone"
    if node.kind == "conv":
        spec = node.attrs["spec"]
        count = (spec.in_channels // spec.groups) * spec.out_channels * spec.kernel_h * spec.kernel_w
        return count + (spec.out_channels if spec.has_bias else 0)
    if node.kind == "sepconv":
        c = node.in_channels
        return 3 * c + 3 * c + c * node.out_channels
    if node.kind == "bn":
        return 2 * node.in_channels
    return 0


def node_macs(node, out_shape):
    n, c, h, w = out_shape
    if node.kind == "conv":
        spec = node.attrs["spec"]
        # bias additions are not multiplies
        return n * h * w * c * (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
    if node.kind == "sepconv":
        return n * h * w * (6 * node.in_channels + node.in_channels * c)
    if node.kind == "bn":
        return 2 * n * c * h * w
    if node.kind == "blurpool":
        return n * h * w * c * 4
    if node.kind == "resize":
        return 4 * n * c * h * w
    return 0


def count_params(graph):
    "Per-layer parameter counts (layers without parameters omitted) and the total"
    per_layer = collections.OrderedDict()
    for node in graph:
        params = node_params(node)
        if params:
            per_layer[node.name] = params
    return per_layer, sum(per_layer.values())


def count_macs(graph, input_shape, samples=1):
    shapes = graph.infer_shapes(input_shape)
    rows = [
        CostRow(node.name, node.kind, shapes[node.name], node_params(node), node_macs(node, shapes[node.name]))
        for node in graph.nodes[1:]
    ]
    return CostReport(rows, shapes[graph.input_node.name], samples)


def format_shape(shape):
    return "x".join(str(v) for v in shape)


def render_report(report, format="text"):
    "Render ``report`` as bytes; the totals row always comes last"
    if format not in REPORT_FORMATS:
        raise InvalidArgument(
            "Unknown report format {!r}, expected one of {}".format(format, ", ".join(REPORT_FORMATS))
        )
    if format == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CostRow._fields)
        for row in report.rows:
            writer.writerow((row.name, row.kind, format_shape(row.out_shape), row.params, row.macs))
        writer.writerow(("total", "", "", report.total_params, report.total_macs))
        return out.getvalue().encode("utf8")
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(templates_root),
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["shape"] = format_shape
    name_width = max([len(row.name) for row in report.rows] + [len("total")])
    text = env.get_template("cost_report.txt").render(report=report, name_width=name_width)
    return text.encode("utf8")
