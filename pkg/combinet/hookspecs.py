from pluggy import HookimplMarker
from pluggy import HookspecMarker

hookspec = HookspecMarker("combinet")
hookimpl = HookimplMarker("combinet")


@hookspec
def arch_presets():
    "Mapping of preset name to a config file path or a config dict"


@hookspec
def register_commands(cli):
    "Add subcommands to the 'combinet' command group"


@hookspec
def synth_shapes():
    "Mapping of shape kind to a painter used by synth_dataset"
