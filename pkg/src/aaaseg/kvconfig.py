"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed as int,
float, bool, or comma-separated tuples of those; anything else stays a
string.
"""
from pathlib import Path

__all__ = ["parse_value", "loads", "load", "dumps"]


def _scalar(text):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_value(text):
    if "," in text:
        return tuple(_scalar(p) for p in text.split(",") if p.strip())
    return _scalar(text)


def loads(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def load(path):
    path = Path(path)
    return loads(path.read_text(), str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(d):
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in d.items())
