"Architecture presets shipped with combinet, calibrated at 224x224x3 and S=1"
from pathlib import Path

from combinet import hookimpl

presets_root = Path(__file__).parent

PRESETS = ("combinet-s", "combinet-m", "combinet-l")


@hookimpl
def arch_presets():
    return {name: str(presets_root / "{}.json".format(name)) for name in PRESETS}
