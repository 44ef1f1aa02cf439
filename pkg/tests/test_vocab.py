import pytest

from niab.vocab import SceneObject, SceneVocabulary, inventory_counts


def test_default_inventory_exactly_118_objects_800_actions(vocabs):
    n_objects, n_actions = inventory_counts(vocabs)
    assert n_objects == 118
    assert n_actions == 800


def test_instantiation_respects_capability_flags(vocabs):
    for vocab in vocabs.values():
        sliceable = set(vocab.names("sliceable"))
        pickupable = set(vocab.names("pickupable"))
        receptacle = set(vocab.names("receptacle"))
        for token in vocab.all_actions():
            if token.startswith("cut_"):
                assert token[4:] in sliceable
            elif token.startswith("bring_"):
                x, y = token[6:].split("_to_")
                assert x in pickupable and y in receptacle
            elif token.startswith("clean_"):
                assert token[6:] in receptacle
            elif token.startswith("toggle_"):
                assert token[7:] in vocab.names("toggleable")


def test_tool_dependent_templates_need_the_tool(vocabs):
    # no knife outside the kitchen: no cut actions there
    for scene in ("bedroom", "livingroom", "bathroom"):
        assert not [t for t in vocabs[scene].all_actions() if t.startswith("cut_")]
    assert [t for t in vocabs["kitchen"].all_actions() if t.startswith("cut_")]
    # no sink in bedroom/livingroom: no wash actions
    for scene in ("bedroom", "livingroom"):
        assert not [t for t in vocabs[scene].all_actions() if t.startswith("wash_")]


def test_object_names_with_to_are_rejected():
    with pytest.raises(ValueError):
        SceneVocabulary(
            scene="kitchen",
            objects=(SceneObject("lead_to_pipe", pickupable=True),),
            atomic_templates=("find_{x}",),
        )


def test_duplicate_object_names_rejected():
    with pytest.raises(ValueError):
        SceneVocabulary(
            scene="kitchen",
            objects=(SceneObject("cup", pickupable=True), SceneObject("cup")),
            atomic_templates=("find_{x}",),
        )
