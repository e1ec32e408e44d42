"""Config file loading: `key = value` lines mapped onto PredictorConfig.

Recognized keys are exactly the PredictorConfig field names, e.g.::

    one_level_bits = 2
    ghr_depth = 12
    monitored_branches = 0x4000, 0x4040

Blank lines and `#` comments are ignored.
"""

from __future__ import annotations

import dataclasses

from .predictor import PredictorConfig


class ConfigFileError(ValueError):
    pass


def _parse_int(tok: str) -> int:
    tok = tok.strip()
    return int(tok, 16) if tok.lower().startswith("0x") else int(tok)


def parse_config(text: str) -> PredictorConfig:
    fields = {f.name: f for f in dataclasses.fields(PredictorConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "monitored_branches":
                kwargs[key] = frozenset(_parse_int(t) for t in value.split(","))
            else:
                kwargs[key] = _parse_int(value)
        except ValueError as exc:
            raise ConfigFileError(f"line {lineno}: {exc}") from exc
    try:
        return PredictorConfig(**kwargs)
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc


def load_config(path) -> PredictorConfig:
    with open(path) as fh:
        return parse_config(fh.read())
