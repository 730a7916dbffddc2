"""Run manifests: every command records its fully-resolved options so the
run can be repeated exactly (``layergate rerun manifest.json --out NEW``)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


# flags declared with nargs="+": the flag appears once, then all values
_NARGS_KEYS = {"checkpoints"}


def options_to_argv(options: dict) -> list[str]:
    """Rebuild an argv from resolved options; inverse of argparse parsing.

    Keys map to ``--kebab-case`` flags; booleans become bare flags, lists
    repeat the flag (or follow it once for nargs-style keys), and the
    reserved key ``positional`` passes through.
    """
    argv: list[str] = []
    for key, value in options.items():
        if key == "positional":
            continue
        flag = "--" + key.replace("_", "-")
        if value is None:
            continue
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, (list, tuple)):
            if not value:
                continue
            if key in _NARGS_KEYS:
                argv.append(flag)
                argv.extend(str(item) for item in value)
            else:
                for item in value:
                    argv.extend([flag, str(item)])
        else:
            argv.extend([flag, str(value)])
    argv.extend(str(p) for p in options.get("positional", []))
    return argv


@dataclass
class RunManifest:
    command: str
    options: dict
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def argv(self) -> list[str]:
        return [self.command] + options_to_argv(self.options)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def start_manifest(command: str, options: dict) -> RunManifest:
    return RunManifest(command=command, options=options, started=_now())


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    manifest.finished = _now()
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    payload = {
        "command": manifest.command,
        "options": manifest.options,
        "outputs": manifest.outputs,
        "started": manifest.started,
        "finished": manifest.finished,
        "version": manifest.version,
    }
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def load_manifest(path) -> RunManifest:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunManifest(
        command=payload["command"],
        options=payload["options"],
        outputs=payload.get("outputs", []),
        started=payload.get("started", ""),
        finished=payload.get("finished", ""),
        version=payload.get("version", ""),
    )
