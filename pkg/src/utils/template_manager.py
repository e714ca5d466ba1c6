from copy import copy
from pathlib import Path
from typing import Any, Dict, Optional, Union

import jinja2
import yaml


class TemplateManager:
    """Loads jinja2 text templates from a YAML file and renders them."""

    def __init__(self, file_path: Union[str, Path], section_path: Optional[str] = None) -> None:
        """
        Args:
            file_path: YAML file holding the templates
            section_path: Optional dot path of the section to load

        Raises:
            FileNotFoundError: If the template file doesn't exist
            yaml.YAMLError: If the YAML file is malformed
            ValueError: If the section is not found
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise FileNotFoundError(f"Template file not found: {file_path}")

        try:
            self._data = yaml.safe_load(file_path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise yaml.YAMLError(f"Failed to parse YAML file {file_path}: {e}")

        if section_path:
            self._data = self._traverse_path(self._data, section_path)

        self._environment = jinja2.Environment(
            undefined=jinja2.StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
        )
        self._environment.filters["sci"] = _scientific
        self._template_cache: Dict[str, jinja2.Template] = {}

    def _traverse_path(self, data: Any, path: str) -> Any:
        current = data

        try:
            for key in path.split("."):
                current = current[key]
        except (KeyError, TypeError) as e:
            raise ValueError(f"Path '{path}' not found in template data") from e

        return current

    def render(self, template_name: str, **template_args) -> str:
        """Render the template stored under ``template_name`` (dot notation allowed).

        Raises:
            ValueError: If the name is missing or does not point at a string
            jinja2.TemplateError: If rendering fails (undefined variables included)
        """
        template_str = copy(self._traverse_path(self._data, template_name))
        if not isinstance(template_str, str):
            raise ValueError(f"Template '{template_name}' is not a string")

        if template_str not in self._template_cache:
            self._template_cache[template_str] = self._environment.from_string(template_str)

        return self._template_cache[template_str].render(**template_args)


def _scientific(value: Any, digits: int = 3) -> str:
    if value is None:
        return "n/a"
    return f"{float(value):.{digits}e}"
