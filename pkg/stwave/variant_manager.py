"""Load ablation and efficiency variants from Markdown files with YAML front matter."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import frontmatter

from stwave.config import RunConfig, apply_overrides


@dataclass
class VariantDefinition:
    """One model variant: a label for tables plus config overrides."""

    name: str
    label: str
    overrides: dict[str, Any] = field(default_factory=dict)
    description: str = ""
    source_path: str = ""

    def override_items(self) -> list[str]:
        """Flatten nested overrides into ``key.path=value`` strings."""
        items: list[str] = []

        def walk(prefix: str, node: Any) -> None:
            if isinstance(node, dict):
                for key, value in node.items():
                    walk(f"{prefix}.{key}" if prefix else str(key), value)
            else:
                items.append(f"{prefix}={_yaml_scalar(node)}")

        walk("", self.overrides)
        return items

    def apply(self, config: RunConfig) -> RunConfig:
        data = config.model_dump(mode="json")
        data = apply_overrides(data, self.override_items())
        data["name"] = f"{config.name}-{self.name}"
        return RunConfig(**data)


def _yaml_scalar(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class VariantManager:
    """Loads variant definitions from a directory of .md files."""

    def __init__(self, variants_dir: str | Path | None = None):
        self.variants_dir = Path(variants_dir) if variants_dir else default_variants_dir()
        self._variants: dict[str, VariantDefinition] = {}

    def load_all(self) -> dict[str, VariantDefinition]:
        self._variants.clear()
        if not self.variants_dir.exists():
            raise FileNotFoundError(f"Variants directory not found: {self.variants_dir}")

        for md_file in sorted(self.variants_dir.glob("*.md")):
            variant = self._parse_variant_file(md_file)
            self._variants[variant.name] = variant

        return self._variants

    def get(self, name: str) -> VariantDefinition:
        if not self._variants:
            self.load_all()
        if name not in self._variants:
            available = list(self._variants.keys())
            raise KeyError(f"Variant '{name}' not found. Available: {available}")
        return self._variants[name]

    def list_variants(self) -> list[VariantDefinition]:
        if not self._variants:
            self.load_all()
        return list(self._variants.values())

    def _parse_variant_file(self, path: Path) -> VariantDefinition:
        post = frontmatter.load(str(path))
        metadata = post.metadata
        name = metadata.get("name", path.stem)
        overrides = metadata.get("overrides") or {}
        if not isinstance(overrides, dict):
            raise ValueError(f"Variant {path.name}: overrides must be a mapping")
        return VariantDefinition(
            name=name,
            label=metadata.get("label", name),
            overrides=overrides,
            description=post.content.strip(),
            source_path=str(path),
        )


def default_variants_dir() -> Path:
    return Path(__file__).resolve().parent / "variants"
