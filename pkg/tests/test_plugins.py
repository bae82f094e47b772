from click.testing import CliRunner
from combinet import hookimpl
from combinet.arch import available_presets, load_config_document
from combinet.data import shape_painters, synth_dataset
from combinet.plugins import DEFAULT_PLUGINS, pm
import click
import numpy as np
import os
import pytest


class TrianglesPlugin:
    __name__ = "TrianglesPlugin"

    @hookimpl
    def synth_shapes(self):
        def paint_triangles(rng, size, num_classes, radius=None):
            mask = np.tril(np.ones((size, size), dtype=np.int64)) * (num_classes - 1)
            return mask, [{"kind": "triangle", "class": num_classes - 1}]

        return {"triangles": paint_triangles}

    @hookimpl
    def arch_presets(self):
        return {"tiny": {"arch": {"growth_rate_k": 2, "stem_channels": 4}}}

    @hookimpl
    def register_commands(self, cli):
        @cli.command()
        @click.argument("name")
        def hello(name):
            click.echo("Hello {}".format(name))


@pytest.fixture
def triangles_plugin():
    plugin = TrianglesPlugin()
    pm.register(plugin, name="triangles")
    yield plugin
    pm.unregister(name="triangles")


def test_default_plugins_are_registered():
    names = {name for name, _ in pm.list_name_plugin()}
    assert set(DEFAULT_PLUGINS) <= names


def test_default_presets():
    presets = available_presets()
    assert ["combinet-l", "combinet-m", "combinet-s"] == sorted(presets)
    assert all(os.path.exists(path) for path in presets.values())


def test_default_shapes():
    assert ["discs", "stripes"] == sorted(shape_painters())


def test_plugin_adds_shape(triangles_plugin):
    assert "triangles" in shape_painters()
    (sample,) = synth_dataset(1, 16, 3, "triangles", 0.0, np.random.default_rng(0))
    assert 2 == sample.mask[15, 0]
    assert 0 == sample.mask[0, 15]
    assert "triangle" == sample.meta["shapes"][0]["kind"]


def test_plugin_adds_preset_as_dict(triangles_plugin):
    doc = load_config_document("tiny")
    assert 2 == doc["arch"]["growth_rate_k"]
    assert {} == doc["train"]


def test_plugin_registers_command(triangles_plugin):
    @click.group()
    def group():
        pass

    pm.hook.register_commands(cli=group)
    result = CliRunner().invoke(group, ["hello", "world"])
    assert 0 == result.exit_code, result.output
    assert "Hello world\n" == result.output
