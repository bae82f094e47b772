"""
Tests to ensure certain things are documented.
"""
from combinet.arch import ARCH_OPTIONS
from combinet.cli import cli
from combinet.plugins import pm
from combinet.trainer import TRAIN_OPTIONS
from pathlib import Path
import pytest
import re

docs_path = Path(__file__).parent.parent / "docs"


def get_headings(filename, underline="-"):
    content = (docs_path / filename).open().read()
    heading_re = re.compile(r"(\w+)(\([^)]*\))?\n\{}+\n".format(underline))
    return set(h[0] for h in heading_re.findall(content))


@pytest.mark.parametrize("config", ARCH_OPTIONS + TRAIN_OPTIONS)
def test_config_options_are_documented(config):
    assert config.name in get_headings("config.rst")


@pytest.mark.parametrize("command", sorted(cli.commands))
def test_commands_are_documented(command):
    assert command in get_headings("cli.rst")


@pytest.mark.parametrize("plugin", [name for name in dir(pm.hook) if not name.startswith("_")])
def test_plugin_hooks_are_documented(plugin):
    headings = [s.split("(")[0] for s in get_headings("plugins.rst", "~")]
    assert plugin in headings
