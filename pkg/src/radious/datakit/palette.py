from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import LabelError

# Fifteen findings plus tooth positions. The exact 33-class list used
# clinically is not published; override with a palette.json.
CONDITION_NAMES = [
    "pulp chamber",
    "restoration",
    "endodontics",
    "crown",
    "decay",
    "pin",
    "composite",
    "bridge",
    "pulpitis",
    "orthodontics",
    "radicular cyst",
    "periapical cyst",
    "cyst",
    "implant",
    "bone graft material",
]
TOOTH_POSITIONS = [
    "central",
    "lateral",
    "canine",
    "first premolar",
    "second premolar",
    "first molar",
    "second molar",
    "third molar",
]
EXTRA_NAMES = ["root", "tooth"]


@dataclass(frozen=True)
class PaletteEntry:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassPalette:
    entries: tuple[PaletteEntry, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise LabelError(f"palette ids must be contiguous from 0, got {ids}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def num_foreground(self) -> int:
        return len(self.entries) - 1

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id].name

    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    def to_json(self) -> list[dict]:
        return [{"id": e.id, "name": e.name, "color": list(e.color)} for e in self.entries]

    @classmethod
    def from_json(cls, items: list[dict]) -> "ClassPalette":
        entries = sorted(
            (PaletteEntry(int(d["id"]), str(d["name"]), tuple(int(c) for c in d["color"])) for d in items),
            key=lambda e: e.id,
        )
        return cls(tuple(entries))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClassPalette":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_names(cls, names: list[str]) -> "ClassPalette":
        """Background plus ``names``, with evenly spread hues."""
        entries = [PaletteEntry(0, "background", (0, 0, 0))]
        n = len(names)
        for i, name in enumerate(names):
            r, g, b = colorsys.hsv_to_rgb(i / max(n, 1), 0.85, 1.0 if i % 2 == 0 else 0.75)
            entries.append(PaletteEntry(i + 1, name, (round(r * 255), round(g * 255), round(b * 255))))
        return cls(tuple(entries))


def default_palette() -> ClassPalette:
    """Background plus 33 foreground classes."""
    teeth = [f"{jaw} {pos}" for jaw in ("upper", "lower") for pos in TOOTH_POSITIONS]
    return ClassPalette.from_names(CONDITION_NAMES + teeth + EXTRA_NAMES)
