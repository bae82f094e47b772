"""
ComBiNet architecture: configuration and graph construction.

Every ``build_*`` function appends nodes to a GraphBuilder, reading from the
node named ``x``, and returns the name of its output node.
"""
import logging
import os

from .graph import GraphBuilder
from .init import he_uniform_init
from .ops import ConvSpec
from .plugins import pm
from .utils import ConfigError, ConfigOption, InvalidArgument, check_options, load_json_file

log = logging.getLogger(__name__)

ARCH_OPTIONS = (
    ConfigOption("growth_rate_k", 8, """
        Channels contributed by every Basic Layer
    """.strip()),
    ConfigOption("num_repeat_blocks", 5, """
        Number of nested Repeat blocks (each halves the spatial size once)
    """.strip()),
    ConfigOption("bl_counts_down", [2, 3, 4, 5, 6], """
        Basic Layers in the encoder Dense block of each level, shallowest first
    """.strip()),
    ConfigOption("bl_counts_up", [2, 3, 4, 5, 6], """
        Basic Layers in the decoder Dense block of each level, shallowest first
    """.strip()),
    ConfigOption("bl_count_bottom", 7, """
        Basic Layers in the Dense block at the bottom of the network
    """.strip()),
    ConfigOption("aspp_dilations", None, """
        Dilation rates per ASPP level, e.g. {"2": [2, 4, 8]} - null for defaults
    """.strip()),
    ConfigOption("aspp_partial_channels", 32, """
        Channels produced by each ASPP branch
    """.strip()),
    ConfigOption("dropout_p", 0.05, """
        Channel dropout rate used throughout the network
    """.strip()),
    ConfigOption("stem_channels", 64, """
        Output channels of the 3x3 Pre-processing convolution
    """.strip()),
    ConfigOption("num_classes", 11, """
        Number of output classes
    """.strip()),
    ConfigOption("input_channels", 3, """
        Channels of the input image
    """.strip()),
    ConfigOption("downsample_compression", 1.0, """
        Downsample 1x1 convolution output width as a fraction of its input
    """.strip()),
)
DEFAULT_ARCH = {option.name: option.default for option in ARCH_OPTIONS}

# Rates at the shallowest ASPP level, halved at each deeper level
BASE_DILATIONS = (2, 4, 8)
FALLBACK_DILATIONS = (1, 2, 3)


def default_aspp_dilations(num_repeat_blocks):
    dilations = {}
    for level in range(2, num_repeat_blocks):
        factor = 2 ** (level - 2)
        rates = tuple(rate // factor for rate in BASE_DILATIONS)
        if min(rates) < 1 or len(set(rates)) != len(rates):
            rates = FALLBACK_DILATIONS
        dilations[level] = rates
    return dilations


class ArchConfig:
    def __init__(self, **kwargs):
        values = dict(DEFAULT_ARCH)
        values.update(kwargs)
        for name in DEFAULT_ARCH:
            setattr(self, name, values.pop(name))
        if values:
            raise ConfigError(
                "Invalid architecture", problems=["unknown option {!r}".format(k) for k in values]
            )
        if self.aspp_dilations is None:
            self.aspp_dilations = default_aspp_dilations(self.num_repeat_blocks)
        else:
            try:
                self.aspp_dilations = {
                    int(level): tuple(rates) for level, rates in self.aspp_dilations.items()
                }
            except (TypeError, ValueError, AttributeError):
                raise ConfigError("aspp_dilations must map level numbers to three rates")
        self.bl_counts_down = list(self.bl_counts_down)
        self.bl_counts_up = list(self.bl_counts_up)

    @classmethod
    def from_dict(cls, data):
        return cls(**check_options(data, ARCH_OPTIONS, "arch"))

    def to_dict(self):
        data = {name: getattr(self, name) for name in DEFAULT_ARCH}
        data["aspp_dilations"] = {
            str(level): list(rates) for level, rates in sorted(self.aspp_dilations.items())
        }
        return data

    def __eq__(self, other):
        return isinstance(other, ArchConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "<ArchConfig k={} levels={} stem={} classes={}>".format(
            self.growth_rate_k, self.num_repeat_blocks, self.stem_channels, self.num_classes
        )

    def has_aspp(self, level):
        return 1 < level < self.num_repeat_blocks

    def violations(self):
        problems = []
        for name in (
            "growth_rate_k",
            "num_repeat_blocks",
            "bl_count_bottom",
            "aspp_partial_channels",
            "stem_channels",
            "num_classes",
            "input_channels",
        ):
            if getattr(self, name) < 1:
                problems.append("{} must be a positive integer".format(name))
        if not 0 <= self.dropout_p < 1:
            problems.append("dropout_p must be in [0, 1)")
        if not 0 < self.downsample_compression <= 1:
            problems.append("downsample_compression must be in (0, 1]")
        levels = self.num_repeat_blocks
        for name in ("bl_counts_down", "bl_counts_up"):
            counts = getattr(self, name)
            if len(counts) != levels:
                problems.append(
                    "{} has {} entries, num_repeat_blocks is {}".format(name, len(counts), levels)
                )
            if any(c < 1 for c in counts):
                problems.append("{} entries must be positive".format(name))
        down = self.bl_counts_down
        if any(a > b for a, b in zip(down, down[1:])):
            problems.append("bl_counts_down must not decrease towards deeper levels")
        expected = set(range(2, levels))
        if set(self.aspp_dilations) != expected:
            problems.append(
                "aspp_dilations must have entries exactly for levels {}, got {}".format(
                    sorted(expected), sorted(self.aspp_dilations)
                )
            )
        for level, rates in sorted(self.aspp_dilations.items()):
            if len(rates) != 3 or len(set(rates)) != 3 or min(rates) < 1:
                problems.append(
                    "aspp_dilations level {}: need 3 distinct positive rates, got {}".format(
                        level, list(rates)
                    )
                )
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("Invalid architecture", problems=problems)
        return self


def build_basic_layer(b, x, k, p):
    "BN, ReLU, completely separable 3x3 convolution to ``k`` channels, dropout"
    x = b.bn(x)
    x = b.relu(x)
    x = b.sepconv(x, k)
    return b.dropout(x, p)


def build_dense_block(b, x, num_bls, k, p, include_input):
    """
    Each Basic Layer reads the block input concatenated with every earlier
    layer output. The block emits the layer outputs, prefixed with its input
    only when ``include_input`` is set (the encoder side).
    """
    if num_bls < 1:
        raise InvalidArgument("dense block needs at least one Basic Layer")
    features = [x]
    for i in range(num_bls):
        with b.scope("bl{}".format(i + 1)):
            out = build_basic_layer(b, b.concat(features), k, p)
        features.append(out)
    if not include_input:
        features = features[1:]
    with b.scope("out"):
        return b.concat(features)


def build_downsample(b, x, out_channels, p):
    x = b.bn(x)
    x = b.relu(x)
    x = b.conv(x, ConvSpec(b.channels(x), out_channels, 1))
    x = b.dropout(x, p)
    return build_antialias_pool(b, x)


def build_antialias_pool(b, x):
    "Stride-1 max-pooling then the stride-2 blur; halves H and W (rounding down)"
    # Replicate one row and column so the stride-1 pool keeps H and W
    x = b.pad(x, bottom=1, right=1)
    x = b.maxpool(x)
    return b.blurpool(x)


def build_upsample(b, x, out_channels, size=None, size_from=None):
    x = b.resize(x, size_from=size_from, size=size)
    return b.conv(x, ConvSpec(b.channels(x), out_channels, 1))


def build_aspp(b, x, out_channels, dilations, partial=32, p=0.05):
    dilations = tuple(int(d) for d in dilations)
    if len(dilations) != 3 or len(set(dilations)) != 3 or min(dilations) < 1:
        raise InvalidArgument("ASPP needs 3 distinct positive dilation rates, got {}".format(dilations))
    channels = b.channels(x)
    branches = []
    with b.scope("branch1x1"):
        y = b.relu(b.bn(x))
        branches.append(b.conv(y, ConvSpec(channels, partial, 1)))
    for rate in dilations:
        with b.scope("rate{}".format(rate)):
            y = b.relu(b.bn(x))
            spec = ConvSpec(channels, partial, 3, dilation=rate, padding=rate)
            branches.append(b.conv(y, spec))
    with b.scope("pool"):
        y = b.gap(x)
        y = b.conv(y, ConvSpec(channels, partial, 1))
        branches.append(b.resize(y, size_from=x))
    y = b.concat(branches)
    y = b.conv(y, ConvSpec(b.channels(y), out_channels, 1), name="project")
    return b.dropout(y, p)


def build_repeat_block(b, x, level, config, inner):
    """
    One level of the U-shaped network. ``inner(b, x)`` builds everything
    below this level and returns its output node.
    """
    k, p = config.growth_rate_k, config.dropout_p
    with b.scope("level{}".format(level)):
        with b.scope("encoder"):
            encoded = build_dense_block(
                b, x, config.bl_counts_down[level - 1], k, p, include_input=True
            )
        skip = encoded
        if config.has_aspp(level):
            with b.scope("aspp"):
                skip = build_aspp(
                    b,
                    encoded,
                    b.channels(encoded),
                    config.aspp_dilations[level],
                    config.aspp_partial_channels,
                    p,
                )
        width = int(b.channels(encoded) * config.downsample_compression)
        with b.scope("down"):
            down = build_downsample(b, encoded, max(width, 1), p)
    inner_out = inner(b, down)
    with b.scope("level{}".format(level)):
        with b.scope("up"):
            up = build_upsample(b, inner_out, b.channels(inner_out), size_from=skip)
        with b.scope("skip"):
            joined = b.concat([skip, up])
        with b.scope("decoder"):
            return build_dense_block(
                b, joined, config.bl_counts_up[level - 1], k, p, include_input=False
            )


def build_combinet(config, seed=0):
    "Build and He-Uniform initialise the full network for ``config``"
    config.validate()
    b = GraphBuilder(config.input_channels)

    def level(number):
        def inner(b, x):
            if number > config.num_repeat_blocks:
                with b.scope("bottom"):
                    return build_dense_block(
                        b,
                        x,
                        config.bl_count_bottom,
                        config.growth_rate_k,
                        config.dropout_p,
                        include_input=False,
                    )
            return build_repeat_block(b, x, number, config, level(number + 1))

        return inner

    with b.scope("pre"):
        x = b.conv(b.input, ConvSpec(config.input_channels, config.stem_channels, 3, padding=1))
    x = level(1)(b, x)
    with b.scope("post"):
        x = b.conv(x, ConvSpec(b.channels(x), config.num_classes, 1, has_bias=True))
    graph = b.build(x, config=config)
    he_uniform_init(graph, seed)
    log.debug("Built %r: %d nodes, %d parameters", config, len(graph), graph.num_parameters())
    return graph


def block_graph(input_channels, build, *args, seed=0, **kwargs):
    "Standalone graph around a single block, e.g. ``block_graph(16, build_basic_layer, 8, 0.05)``"
    b = GraphBuilder(input_channels)
    out = build(b, b.input, *args, **kwargs)
    graph = b.build(out)
    he_uniform_init(graph, seed)
    return graph


def available_presets():
    presets = {}
    for mapping in pm.hook.arch_presets():
        presets.update(mapping or {})
    return presets


def load_config_document(source):
    """
    Resolve ``source`` (a preset name, a JSON file path or a dict) to a
    ``{"arch": {...}, "train": {...}}`` document.
    """
    if isinstance(source, dict):
        data = source
    elif os.path.exists(str(source)):
        data = load_json_file(source)
    else:
        presets = available_presets()
        if source not in presets:
            raise ConfigError(
                "{!r} is neither a config file nor a preset (presets: {})".format(
                    source, ", ".join(sorted(presets))
                )
            )
        preset = presets[source]
        data = preset if isinstance(preset, dict) else load_json_file(preset, "preset")
    if not isinstance(data, dict):
        raise ConfigError("Config document must be a JSON object")
    if "arch" in data or "train" in data:
        unknown = sorted(set(data) - {"arch", "train", "calibration", "name"})
        if unknown:
            raise ConfigError(
                "Invalid configuration",
                problems=["unknown section {!r}".format(key) for key in unknown],
            )
        return {"arch": data.get("arch") or {}, "train": data.get("train") or {}}
    return {"arch": data, "train": {}}


def resolve_arch(source, overrides=None):
    arch = dict(load_config_document(source)["arch"])
    arch.update(overrides or {})
    return ArchConfig.from_dict(arch).validate()
