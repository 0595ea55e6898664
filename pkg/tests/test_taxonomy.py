import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SEEN_CLASSES, UNSEEN_CLASSES
from ovdet.taxonomy import (
    CategoryRecord,
    Protocol,
    SplitParams,
    SplitSpec,
    TaxonomyError,
    TaxonomyRegistry,
    gen_split,
    load_taxonomy,
    validate_split,
)


def test_ref_shaped_fixture_counts(ref_registry):
    assert len(ref_registry) == 821
    assert len(ref_registry.classes) == 26
    assert len(ref_registry.undefined) == 31
    assert len(ref_registry.defined) == 790


def test_empty_file_gives_empty_registry(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    reg = load_taxonomy(p)
    assert len(reg) == 0 and reg.classes == []


def test_five_records_two_classes(tmp_path):
    recs = [
        {"name": "a", "class": "X"},
        {"name": "b", "class": "X"},
        {"name": "c", "class": "Y"},
        {"name": "d", "class": "Y"},
        {"name": "e"},
    ]
    p = tmp_path / "t.json"
    p.write_text(json.dumps(recs))
    reg = load_taxonomy(p)
    assert len(reg.class_index) == 2
    assert sum(len(v) for v in reg.class_index.values()) == len(reg.defined) == 4


def test_duplicate_names_rejected(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps([{"name": "a"}, {"name": "a"}]))
    with pytest.raises(TaxonomyError, match="duplicate"):
        load_taxonomy(p)


def test_parse_failure(tmp_path):
    p = tmp_path / "t.json"
    p.write_text("{not json")
    with pytest.raises(TaxonomyError):
        load_taxonomy(p)


def test_species_without_class_warns_and_is_undefined(tmp_path, caplog):
    p = tmp_path / "t.json"
    p.write_text(json.dumps([{"name": "odd", "species": "Odd thing"}]))
    with caplog.at_level(logging.WARNING):
        reg = load_taxonomy(p)
    assert reg["odd"].undefined
    assert "no Class" in caplog.text


def test_undefined_iff_class_absent():
    assert CategoryRecord("a").undefined
    assert not CategoryRecord("a", ranks={"Class": "X"}).undefined
    with pytest.raises(TaxonomyError):
        CategoryRecord("")


def test_registry_preserves_insertion_order(tmp_path):
    names = ["zeta", "alpha", "mu"]
    p = tmp_path / "t.json"
    p.write_text(json.dumps([{"name": n, "class": "K"} for n in names]))
    reg = load_taxonomy(p)
    assert reg.names == names
    assert list(reg.class_index["K"]) == names


def test_save_load_round_trip(tmp_path, ref_registry):
    p = ref_registry.save(tmp_path / "rt.json")
    assert load_taxonomy(p) == ref_registry
    assert load_taxonomy(p).digest() == ref_registry.digest()


# --------------------------------------------------------------------------
# split rules


def test_class_level_reference_shape(ref_registry):
    split = gen_split(ref_registry, Protocol.CLASS_LEVEL, SplitParams(seen_classes=list(SEEN_CLASSES)), seed=0)
    assert len(split.seen) == 20 and len(split.unseen) == 6
    assert split.unseen == set(UNSEEN_CLASSES)


def test_intra_class_reference_shape(ref_registry):
    split = gen_split(ref_registry, Protocol.INTRA_CLASS, SplitParams(seen_classes=list(SEEN_CLASSES)))
    assert (len(split.seen), len(split.unseen)) == (613, 177)


def test_inter_class_reference_shape(ref_registry):
    split = gen_split(ref_registry, Protocol.INTER_CLASS)
    assert (len(split.seen), len(split.unseen)) == (572, 183)
    for cls, members in ref_registry.class_index.items():
        n = len(members)
        if n < 4:
            assert not (set(members) & (split.seen | split.unseen))
        else:
            assert len(set(members) & split.unseen) == n // 4


def test_inter_class_four_members():
    reg = TaxonomyRegistry(CategoryRecord(n, ranks={"Class": "K"}) for n in "dbca")
    split = gen_split(reg, "InterClass")
    assert split.unseen == {"d"} and split.seen == {"a", "b", "c"}


def test_inter_class_sizes_5_4_3(small_registry):
    split = gen_split(small_registry, Protocol.INTER_CLASS)
    assert len(split.seen) == 7 and len(split.unseen) == 2
    assert not {"c0", "c1", "c2"} & (split.seen | split.unseen)


def test_inter_class_needs_eligible_class():
    reg = TaxonomyRegistry(CategoryRecord(n, ranks={"Class": "K"}) for n in "abc")
    with pytest.raises(TaxonomyError):
        gen_split(reg, Protocol.INTER_CLASS)


def test_unknown_class_rejected(small_registry):
    with pytest.raises(TaxonomyError, match="unknown Class"):
        gen_split(small_registry, Protocol.INTRA_CLASS, SplitParams(seen_classes=["A", "Nope"]))


def test_class_level_requires_list(small_registry):
    with pytest.raises(TaxonomyError):
        gen_split(small_registry, Protocol.CLASS_LEVEL)


def test_fully_supervised_has_no_unseen(ref_registry):
    split = gen_split(ref_registry, Protocol.FULLY_SUPERVISED)
    assert not split.unseen and len(split.seen) == 821
    assert validate_split(split, ref_registry).ok


def test_held_out(small_registry):
    split = gen_split(small_registry, Protocol.HELD_OUT, SplitParams(unseen_categories=["a0", "b3"]))
    assert split.unseen == {"a0", "b3"} and len(split.seen) == 10
    with pytest.raises(TaxonomyError):
        gen_split(small_registry, Protocol.HELD_OUT, SplitParams(unseen_categories=["zzz"]))


def test_protocol_parse():
    assert Protocol.parse("inter-class") is Protocol.INTER_CLASS
    with pytest.raises(TaxonomyError):
        Protocol.parse("bogus")


def test_intra_equals_union_of_class_level_buckets(ref_registry):
    seen = list(SEEN_CLASSES)
    intra = gen_split(ref_registry, Protocol.INTRA_CLASS, SplitParams(seen_classes=seen))
    cl = gen_split(ref_registry, Protocol.CLASS_LEVEL, SplitParams(seen_classes=seen))
    assert intra.seen == {n for c in cl.seen for n in ref_registry.class_index[c]}
    assert intra.unseen == {n for c in cl.unseen for n in ref_registry.class_index[c]}
    assert set(cl.seen_categories(ref_registry)) == intra.seen


def test_split_file_round_trip_is_deterministic(tmp_path, ref_registry):
    a = gen_split(ref_registry, Protocol.INTER_CLASS, seed=5).save(tmp_path / "a.json")
    b = gen_split(ref_registry, Protocol.INTER_CLASS, seed=5).save(tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    data = json.loads(a.read_text())
    assert data["seen"] == sorted(data["seen"])
    assert SplitSpec.load(a) == gen_split(ref_registry, Protocol.INTER_CLASS, seed=5)


# --------------------------------------------------------------------------
# validation


def test_generated_split_validates(ref_registry):
    for proto, params in (
        (Protocol.INTRA_CLASS, SplitParams(seen_classes=list(SEEN_CLASSES))),
        (Protocol.INTER_CLASS, None),
        (Protocol.CLASS_LEVEL, SplitParams(seen_classes=list(SEEN_CLASSES))),
    ):
        report = validate_split(gen_split(ref_registry, proto, params), ref_registry)
        assert report.ok, report.lines()


def test_overlap_fails_disjointness(small_registry):
    good = gen_split(small_registry, Protocol.INTRA_CLASS, SplitParams(seen_classes=["A"]))
    bad = SplitSpec(good.protocol, good.seen | {"b0"}, good.unseen, 0, good.source_digest)
    report = validate_split(bad, small_registry)
    assert "disjoint" in report.failures()


def test_digest_mismatch_flagged(small_registry, ref_registry):
    split = gen_split(small_registry, Protocol.INTER_CLASS)
    report = validate_split(split, ref_registry)
    assert "digest" in report.failures()


# --------------------------------------------------------------------------
# properties


@st.composite
def registries(draw):
    sizes = draw(st.lists(st.integers(0, 11), min_size=1, max_size=6))
    n_undef = draw(st.integers(0, 3))
    recs = []
    for ci, n in enumerate(sizes):
        names = draw(st.lists(st.text("abcdefgh", min_size=1, max_size=5), min_size=n, max_size=n, unique=True))
        recs += [CategoryRecord(f"c{ci}-{x}", ranks={"Class": f"K{ci}"}) for x in names]
    recs += [CategoryRecord(f"undef{k}") for k in range(n_undef)]
    return TaxonomyRegistry(recs)


@settings(max_examples=60, deadline=None)
@given(registries(), st.data())
def test_partition_properties(reg, data):
    classes = reg.classes
    if not classes:
        return
    seen_classes = data.draw(st.lists(st.sampled_from(classes), unique=True))
    intra = gen_split(reg, Protocol.INTRA_CLASS, SplitParams(seen_classes=seen_classes))
    assert not intra.seen & intra.unseen
    assert intra.seen | intra.unseen == set(reg.defined)
    cl = gen_split(reg, Protocol.CLASS_LEVEL, SplitParams(seen_classes=seen_classes))
    assert intra.seen == {n for c in cl.seen for n in reg.class_index[c]}
    if any(len(m) >= 4 for m in reg.class_index.values()):
        inter = gen_split(reg, Protocol.INTER_CLASS)
        assert not inter.seen & inter.unseen
        eligible = {n for m in reg.class_index.values() if len(m) >= 4 for n in m}
        assert inter.seen | inter.unseen == eligible
        for m in reg.class_index.values():
            if len(m) >= 4:
                assert len(set(m) & inter.unseen) == len(m) // 4
        assert gen_split(reg, Protocol.INTER_CLASS) == inter
