from combinet.version import __version_info__, __version__  # noqa
from .hookspecs import hookimpl # noqa
from .hookspecs import hookspec # noqa
