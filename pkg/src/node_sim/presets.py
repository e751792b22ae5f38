"""Named configuration presets.

Built-in presets ship as package data; a directory named by the
``NODE_SIM_PRESETS`` environment variable takes precedence and may add
new names (files called ``<name>.ini``).
"""

from __future__ import annotations

import os
from importlib import resources

from . import config as cfgmod

BUILTIN = ("paper", "ideal", "unstable-geometry")


def _builtin_text(name: str) -> str:
    ref = resources.files("node_sim") / "presets" / f"{name}.ini"
    return ref.read_text(encoding="utf-8")


def list_presets() -> list[str]:
    names = set(BUILTIN)
    root = os.environ.get("NODE_SIM_PRESETS")
    if root and os.path.isdir(root):
        for entry in os.listdir(root):
            if entry.endswith(".ini"):
                names.add(entry[:-4])
    return sorted(names)


def preset_text(name: str) -> str:
    root = os.environ.get("NODE_SIM_PRESETS")
    if root:
        candidate = os.path.join(root, f"{name}.ini")
        if os.path.isfile(candidate):
            with open(candidate, "r", encoding="utf-8") as fh:
                return fh.read()
    if name in BUILTIN:
        return _builtin_text(name)
    raise cfgmod.ConfigError(
        f"unknown preset {name!r}; available: {', '.join(list_presets())}"
    )


def load_preset(name: str) -> dict:
    return cfgmod.parse_config(preset_text(name))
