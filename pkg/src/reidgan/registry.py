"""Published reference results, stored as the exact decimal strings printed.

Values stay strings on disk so that loading and re-serialising is the
identity; :meth:`RegistryRow.value` converts to float on demand. A missing
entry (printed as "-") is ``None``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

FORMAT = "reidgan.registry/1"


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class RegistryRow:
    key: str
    table: str
    row: int
    method: str
    preset: str | None
    provenance: str
    metrics: dict[str, str | None]

    def value(self, metric: str) -> float | None:
        raw = self.metrics[metric]
        return None if raw is None else float(raw)

    def values(self) -> dict[str, float | None]:
        return {m: self.value(m) for m in self.metrics}

    def to_dict(self) -> dict:
        return {
            "key": self.key, "table": self.table, "row": self.row, "method": self.method,
            "preset": self.preset, "provenance": self.provenance, "metrics": dict(self.metrics),
        }


class ResultsRegistry:
    def __init__(self, rows: list[RegistryRow]):
        self._rows = {r.key: r for r in rows}

    @classmethod
    def from_json(cls, text: str) -> "ResultsRegistry":
        data = json.loads(text)
        if data.get("format") != FORMAT:
            raise ValueError(f"not a {FORMAT} document")
        return cls([RegistryRow(**r) for r in data["rows"]])

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ResultsRegistry":
        if path is None:
            text = resources.files("reidgan").joinpath("registry.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(text)

    def to_json(self) -> str:
        doc = {"format": FORMAT, "rows": [r.to_dict() for r in self._rows.values()]}
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    def __getitem__(self, key: str) -> RegistryRow:
        try:
            return self._rows[key]
        except KeyError:
            raise RegistryError(f"no registry row {key!r}; known: {', '.join(self._rows)}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._rows

    def __iter__(self):
        return iter(self._rows.values())

    def keys(self) -> list[str]:
        return list(self._rows)
