from typing import Any


def merge_dicts(base: dict, override: dict) -> dict:
    """Recursively merge ``override`` into ``base`` in place and return ``base``.

    Nested mappings merge key by key; any other value in ``override`` replaces the
    one in ``base``. Used to layer CLI flags over YAML config sections.
    """
    for key, value in override.items():
        current: Any = base.get(key)
        if isinstance(current, dict) and isinstance(value, dict):
            merge_dicts(current, value)
        else:
            base[key] = value
    return base
