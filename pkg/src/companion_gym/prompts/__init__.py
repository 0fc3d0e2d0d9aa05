"""Prompt templates. Placeholders are ``{name}``; literal braces need no escaping."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path


@lru_cache(maxsize=None)
def load_prompt(name: str, directory: str | None = None) -> str:
    if directory:
        return (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(name: str, directory: str | None = None, **slots: object) -> str:
    text = load_prompt(name, directory)
    for key, value in slots.items():
        text = text.replace("{" + key + "}", str(value))
    return text
