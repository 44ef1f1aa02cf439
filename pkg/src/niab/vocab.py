"""Scene vocabularies: objects, capability flags, and instantiable atomic actions.

One JSON file per scene ships under ``data/vocab/``. Template instantiation
respects capability flags (``cut`` only on sliceable objects, ``bring``
targets only receptacles, and so on); tool-dependent templates additionally
require the named tool object in the scene (``cut`` needs a knife, ``wash``
a sink, ``toast`` a toaster).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .episodes import SCENES, check_action_token
from .errors import InfeasibleTemplate

CAPABILITIES = ("pickupable", "receptacle", "sliceable", "washable", "toggleable")

# template name -> (slot capability requirements, required tool object)
TEMPLATES = {
    "find_{x}": ({"x": "pickupable"}, None),
    "bring_{x}_to_{y}": ({"x": "pickupable", "y": "receptacle"}, None),
    "wash_{x}": ({"x": "washable"}, "sink"),
    "cut_{x}": ({"x": "sliceable"}, "knife"),
    "toggle_{x}": ({"x": "toggleable"}, None),
    "clean_{y}": ({"y": "receptacle"}, None),
    "toast_{x}": ({"x": "sliceable"}, "toaster"),
}


@dataclass(frozen=True)
class SceneObject:
    name: str
    pickupable: bool = False
    receptacle: bool = False
    sliceable: bool = False
    washable: bool = False
    toggleable: bool = False

    def has(self, capability: str) -> bool:
        return bool(getattr(self, capability))


@dataclass(frozen=True)
class SceneVocabulary:
    scene: str
    objects: tuple[SceneObject, ...]
    atomic_templates: tuple[str, ...]

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}")
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.scene}: duplicate object names")
        for n in names:
            check_action_token(n)
            if "_to_" in n:
                raise ValueError(f"{self.scene}: object name {n!r} would be ambiguous in tokens")
        for t in self.atomic_templates:
            if t not in TEMPLATES:
                raise InfeasibleTemplate(f"unknown template {t!r}")

    def object(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    def names(self, capability: str | None = None) -> list[str]:
        if capability is None:
            return [o.name for o in self.objects]
        return [o.name for o in self.objects if o.has(capability)]

    def has_object(self, name: str) -> bool:
        return any(o.name == name for o in self.objects)

    def instantiate(self, template: str) -> list[str]:
        """All action tokens this template yields in this scene."""
        slots, tool = TEMPLATES[template]
        if tool is not None and not self.has_object(tool):
            return []
        pools = {slot: self.names(cap) for slot, cap in slots.items()}
        tokens = []
        if list(slots) == ["x", "y"]:
            for x in pools["x"]:
                for y in pools["y"]:
                    tokens.append(template.format(x=x, y=y))
        else:
            slot = next(iter(slots))
            for v in pools[slot]:
                tokens.append(template.format(**{slot: v}))
        return tokens

    def all_actions(self) -> list[str]:
        tokens = []
        for t in self.atomic_templates:
            tokens.extend(self.instantiate(t))
        return tokens


def _vocab_from_dict(d: dict) -> SceneVocabulary:
    objects = tuple(
        SceneObject(
            name=o["name"],
            **{c: bool(o.get(c, False)) for c in CAPABILITIES},
        )
        for o in d["objects"]
    )
    return SceneVocabulary(
        scene=d["scene"],
        objects=objects,
        atomic_templates=tuple(d["atomic_templates"]),
    )


def load_vocab_file(path) -> SceneVocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        return _vocab_from_dict(json.load(fh))


def load_default_vocabs() -> dict[str, SceneVocabulary]:
    """The four scene vocabularies shipped with the package."""
    vocabs = {}
    base = resources.files("niab").joinpath("data/vocab")
    for scene in SCENES:
        with base.joinpath(f"{scene}.json").open("r", encoding="utf-8") as fh:
            vocabs[scene] = _vocab_from_dict(json.load(fh))
    return vocabs


def load_vocab_dir(dirpath) -> dict[str, SceneVocabulary]:
    import os

    vocabs = {}
    for scene in SCENES:
        vocabs[scene] = load_vocab_file(os.path.join(dirpath, f"{scene}.json"))
    return vocabs


def inventory_counts(vocabs: dict[str, SceneVocabulary]) -> tuple[int, int]:
    """(total objects, total instantiable atomic actions) across scenes."""
    n_objects = sum(len(v.objects) for v in vocabs.values())
    n_actions = sum(len(v.all_actions()) for v in vocabs.values())
    return n_objects, n_actions
