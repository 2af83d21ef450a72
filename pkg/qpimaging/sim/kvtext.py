"""Line-oriented ``key=value`` text used for scene, plan and config files."""

from pathlib import Path
from typing import Any, Dict, Mapping, Union

from .errors import SceneError


def parse_kv(text: str, *, source: str = "<text>") -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(
                f"{source}:{lineno}: expected key=value, got {raw.strip()!r}",
                code="BAD_VALUE",
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise SceneError(f"{source}:{lineno}: empty key", code="BAD_VALUE")
        if key in out:
            raise SceneError(f"{source}:{lineno}: duplicate key {key!r}", code="BAD_VALUE")
        out[key] = value
    return out


def read_kv(path: Union[str, Path]) -> Dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(encoding="utf-8"), source=str(p))


def format_kv(values: Mapping[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (list, tuple)):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
