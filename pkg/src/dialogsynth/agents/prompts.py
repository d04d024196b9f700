"""Prompt templates stored as text files with ``{name}`` placeholders."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path
from typing import Mapping

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


def render_template(template: str, values: Mapping[str, object]) -> str:
    """Substitute ``{name}`` for known names only; JSON braces in the template stay untouched."""

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


def placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


class PromptTemplates:
    """Bundled templates, optionally overridden by same-named ``.txt`` files in ``directory``."""

    def __init__(self, directory: str | Path | None = None):
        self._texts: dict[str, str] = {}
        bundled = resources.files("dialogsynth.data").joinpath("templates")
        for entry in bundled.iterdir():
            if entry.name.endswith(".txt"):
                self._texts[entry.name[:-4]] = entry.read_text("utf-8")
        if directory is not None:
            for path in Path(directory).glob("*.txt"):
                self._texts[path.stem] = path.read_text("utf-8")

    def __getitem__(self, name: str) -> str:
        return self._texts[name]

    def names(self) -> list[str]:
        return sorted(self._texts)

    def render(self, name: str, **values: object) -> str:
        return render_template(self._texts[name], values).strip()


def _data_text(name: str) -> str:
    return resources.files("dialogsynth.data").joinpath(name).read_text("utf-8")


def default_rules() -> str:
    return _data_text("rules.txt").strip()


def default_exemplar() -> str:
    return _data_text("exemplar_dialogue.txt").strip()
