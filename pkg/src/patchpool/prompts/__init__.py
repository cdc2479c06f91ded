"""Prompt template assets.

Templates are plain-text files with ``string.Template`` placeholders, loaded
from package data so they ship with the wheel. Rendering is strict:
a missing placeholder raises instead of silently leaving a hole.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def load(name: str) -> Template:
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render(name: str, **values: str) -> str:
    return load(name).substitute(**values)
