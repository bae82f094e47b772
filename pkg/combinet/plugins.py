import importlib
import pluggy
from . import hookspecs

DEFAULT_PLUGINS = (
    "combinet.presets",
    "combinet.shapes",
)

pm = pluggy.PluginManager("combinet")
pm.add_hookspecs(hookspecs)
pm.load_setuptools_entrypoints("combinet")

# Load default plugins
for plugin in DEFAULT_PLUGINS:
    mod = importlib.import_module(plugin)
    pm.register(mod, plugin)
