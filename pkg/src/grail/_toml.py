try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path


def load_toml(path):
    with open(Path(path), "rb") as fh:
        return tomllib.load(fh)


def loads_toml(text):
    return tomllib.loads(text)


TOMLDecodeError = tomllib.TOMLDecodeError
