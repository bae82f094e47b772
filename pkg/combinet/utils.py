import collections
import datetime
import json
import os
import tempfile
import time
import zlib

import numpy as np

ConfigOption = collections.namedtuple("ConfigOption", ("name", "default", "help"))


class CombinetError(Exception):
    exit_code = 1

    def __init__(self, message, title=None, exit_code=None):
        super().__init__(message)
        self.message = message
        self.title = title
        if exit_code is not None:
            self.exit_code = exit_code


class InvalidArgument(CombinetError, ValueError):
    exit_code = 2


class DegenerateStatistics(InvalidArgument):
    pass


class EmptyReduction(CombinetError, ValueError):
    pass


class MissingTape(CombinetError):
    pass


class TapeConsumed(CombinetError):
    pass


class GraphError(CombinetError):
    exit_code = 2


class ConfigError(CombinetError):
    exit_code = 2

    def __init__(self, message, problems=None, **kwargs):
        self.problems = list(problems or [])
        if self.problems:
            message = "{}:\n{}".format(
                message, "\n".join("  - {}".format(p) for p in self.problems)
            )
        super().__init__(message, **kwargs)


class DatasetError(CombinetError):
    exit_code = 2


class CheckpointError(CombinetError):
    exit_code = 2


class NumericError(CombinetError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, layer=None, **kwargs):
        self.layer = layer
        if layer is not None:
            message = "{} (layer {})".format(message, layer)
        super().__init__(message, **kwargs)


def value_as_boolean(value):
    if value.lower() not in ("on", "off", "true", "false", "1", "0"):
        raise ValueAsBooleanError
    return value.lower() in ("on", "true", "1")


class ValueAsBooleanError(ValueError):
    pass


def parse_option_value(name, value, default):
    """
    Convert the string ``value`` for option ``name`` to the type of ``default``.

    Lists are written comma separated, e.g. ``bl_counts_down:2,3,4``.
    """
    if isinstance(default, bool):
        try:
            return value_as_boolean(value)
        except ValueAsBooleanError:
            raise ConfigError('"{}" should be on/off/true/false/1/0'.format(name))
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError('"{}" should be an integer'.format(name))
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError('"{}" should be a number'.format(name))
    if isinstance(default, (list, tuple)):
        try:
            return [int(bit) for bit in value.split(",") if bit.strip()]
        except ValueError:
            raise ConfigError('"{}" should be a comma separated list of integers'.format(name))
    if default is None or isinstance(default, dict):
        try:
            return json.loads(value)
        except ValueError:
            raise ConfigError('"{}" should be a JSON value'.format(name))
    return value


def substream(seed, *keys):
    """
    Independent random generator for ``(seed, *keys)``.

    Keys may be integers (sample or pass indices) or names such as
    ``"shuffle"``; the same arguments always give the same stream.
    """
    if seed is None or int(seed) < 0:
        raise InvalidArgument("seed must be a non-negative integer, got {!r}".format(seed))
    spawn_key = tuple(
        key if isinstance(key, (int, np.integer)) else zlib.crc32(str(key).encode("utf8"))
        for key in keys
    )
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    )


def worker_count():
    "Number of worker threads, from COMBINET_THREADS (0 or unset means one per CPU)"
    raw = os.environ.get("COMBINET_THREADS", "0").strip() or "0"
    if not raw.isdigit():
        raise ConfigError("COMBINET_THREADS should be a non-negative integer, got {!r}".format(raw))
    count = int(raw)
    if count == 0:
        count = os.cpu_count() or 1
    return count


class CustomJSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (set, frozenset)):
            return sorted(obj)
        return json.JSONEncoder.default(self, obj)


def dumps(data):
    return json.dumps(data, indent=2, sort_keys=True, cls=CustomJSONEncoder)


def write_atomic(path, content):
    "Write bytes or text to ``path`` through a temporary file and a rename"
    if isinstance(content, str):
        content = content.encode("utf8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(content)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def run_directory(root, command, now=None):
    "Create and return ``<root>/<timestamp>-<command>``, unique within root"
    now = now or datetime.datetime.now()
    base = os.path.join(root, "{}-{}".format(now.strftime("%Y%m%d-%H%M%S"), command))
    path = base
    suffix = 1
    while os.path.exists(path):
        path = "{}-{}".format(base, suffix)
        suffix += 1
    os.makedirs(path)
    return path


class RunManifest:
    def __init__(self, command, argv, config=None, seeds=None, version=None):
        self.command = command
        self.argv = list(argv)
        self.config = config or {}
        self.seeds = seeds or {}
        self.version = version
        self.artifacts = {}
        self.started = time.time()
        self.duration = None

    def add_artifact(self, name, path):
        self.artifacts[name] = path

    def to_dict(self):
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "version": self.version,
            "wall_seconds": self.duration,
        }

    def write(self, path):
        self.duration = round(time.time() - self.started, 3)
        write_atomic(path, dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf8") as fp:
                data = json.load(fp)
        except (OSError, ValueError) as e:
            raise ConfigError("Could not read run manifest {}: {}".format(path, e))
        for key in ("command", "argv"):
            if key not in data:
                raise ConfigError("Run manifest {} is missing {!r}".format(path, key))
        manifest = cls(
            data["command"],
            data["argv"],
            config=data.get("config"),
            seeds=data.get("seeds"),
            version=data.get("version"),
        )
        manifest.artifacts = data.get("artifacts") or {}
        manifest.duration = data.get("wall_seconds")
        return manifest


def load_json_file(path, what="config"):
    "Parse the JSON document at ``path``, reporting syntax errors by line and column"
    try:
        with open(path, encoding="utf8") as fp:
            content = fp.read()
    except OSError as e:
        raise ConfigError("Could not read {} {}: {}".format(what, path, e.strerror))
    try:
        return json.loads(content)
    except json.JSONDecodeError as e:
        raise ConfigError(
            "Invalid JSON in {} {}, line {} column {}: {}".format(
                what, path, e.lineno, e.colno, e.msg
            )
        )


def check_options(data, options, section):
    """
    Check ``data`` against a table of ConfigOptions and return the merged
    values. Unknown keys and type mismatches are reported together.
    """
    if not isinstance(data, dict):
        raise ConfigError("{} section must be an object, got {}".format(section, type(data).__name__))
    defaults = {option.name: option.default for option in options}
    problems = []
    values = dict(defaults)
    for key, value in data.items():
        if key not in defaults:
            problems.append("{}: unknown option {!r}".format(section, key))
            continue
        default = defaults[key]
        if not _type_matches(value, default):
            problems.append(
                "{}.{}: expected {}, got {!r}".format(section, key, _type_name(default), value)
            )
            continue
        values[key] = list(value) if isinstance(value, (list, tuple)) else value
    if problems:
        raise ConfigError("Invalid configuration", problems=problems)
    return values


def _type_matches(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple)) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        )
    if isinstance(default, str):
        return isinstance(value, str)
    return value is None or isinstance(value, dict)


def _type_name(default):
    if isinstance(default, bool):
        return "a boolean"
    if isinstance(default, int):
        return "an integer"
    if isinstance(default, float):
        return "a number"
    if isinstance(default, (list, tuple)):
        return "a list of integers"
    if isinstance(default, str):
        return "a string"
    return "an object or null"
