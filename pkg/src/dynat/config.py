"""Flat sectioned key=value config files.

The grammar is a small TOML subset: [section] headers (dots allowed in
names), one `key = value` per line, full-line or trailing # comments.
Values are booleans (true/false), integers, floats, double-quoted
strings, or flat [a, b, c] lists of those scalars.  Anything else,
including bare strings, is an error: a typo should never silently
become a string.

format_config writes the same shape back out; floats use repr, so a
parse -> format round trip is byte-stable.
"""

from .errors import ConfigError


def _parse_scalar(raw: str, where: str):
    if raw == "true":
        return True
    if raw == "false":
        return False
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        inner = raw[1:-1]
        if '"' in inner:
            raise ConfigError(f"{where}: nested quote in string {raw}")
        return inner
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    raise ConfigError(f"{where}: cannot parse value {raw!r} (strings need double quotes)")


def _parse_value(raw: str, where: str):
    if raw.startswith("["):
        if not raw.endswith("]"):
            raise ConfigError(f"{where}: unterminated list {raw!r}")
        body = raw[1:-1].strip()
        if not body:
            return []
        return [_parse_scalar(part.strip(), where) for part in body.split(",")]
    return _parse_scalar(raw, where)


def _strip_comment(line: str) -> str:
    # a # starts a comment unless it sits inside a quoted string
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def parse_config_text(text: str, origin: str = "config") -> dict:
    """Parse into {section: {key: value}}, preserving file order."""
    sections: dict = {}
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).strip()
        if not line:
            continue
        where = f"{origin}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{where}: empty section name")
            if name in sections:
                raise ConfigError(f"{where}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        if current is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ConfigError(f"{where}: empty key")
        if key in sections[current]:
            raise ConfigError(f"{where}: duplicate key '{key}' in [{current}]")
        sections[current][key] = _parse_value(raw, where)
    return sections


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), origin=str(path))


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        if '"' in value:
            raise ConfigError(f"cannot serialise string with quotes: {value!r}")
        return f'"{value}"'
    raise ConfigError(f"cannot serialise {type(value).__name__} value {value!r}")


def format_config(sections: dict) -> str:
    """Serialise {section: {key: value}} in the given order."""
    out = []
    for name, kv in sections.items():
        out.append(f"[{name}]")
        for key, value in kv.items():
            if isinstance(value, (list, tuple)):
                body = ", ".join(_format_scalar(v) for v in value)
                out.append(f"{key} = [{body}]")
            else:
                out.append(f"{key} = {_format_scalar(value)}")
        out.append("")
    return "\n".join(out)
