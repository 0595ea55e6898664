import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovdet.textspace import (
    EncoderError,
    EncoderSpec,
    FrozenBankError,
    PrototypeBank,
    TextPrototypeEncoder,
    build_prototype_bank,
    encode_category,
    register_adapter,
    swap_vocabulary,
    unregister_adapter,
)

COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["circle", "square", "triangle", "diamond"]
GRID = [f"{c} {s}" for c in COLORS for s in SHAPES]
COMP = EncoderSpec("Compositional", d=64, seed=0)
HASH = EncoderSpec("Hashed", d=64, seed=0)


def _oracle_token(token, d, seed):
    h = hashlib.sha256(f"token|{seed}|{token}".encode()).digest()
    v = np.random.default_rng(int.from_bytes(h[:8], "little")).standard_normal(d)
    return v / np.linalg.norm(v)


def test_spec_invariants():
    with pytest.raises(EncoderError):
        EncoderSpec(d=4)
    with pytest.raises(EncoderError):
        EncoderSpec(prompt_template="no slot")
    with pytest.raises(EncoderError):
        EncoderSpec(prompt_template="{name} and {name}")
    assert EncoderSpec.from_json(COMP.to_json()) == COMP


@pytest.mark.parametrize("spec", [COMP, HASH])
def test_deterministic_and_unit_norm(spec):
    a, b = encode_category("red circle", spec), encode_category("red circle", spec)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-6


def test_compositional_matches_token_sum_oracle():
    want = _oracle_token("red", 64, 0) + _oracle_token("circle", 64, 0)
    want /= np.linalg.norm(want)
    np.testing.assert_allclose(encode_category("red circle", COMP), want, atol=1e-12)


def test_shared_token_raises_similarity():
    rc, rs, bs = (encode_category(n, COMP) for n in ("red circle", "red square", "blue square"))
    assert rc @ rs > rc @ bs


def test_intra_color_beats_cross_color_similarity():
    emb = {n: encode_category(n, COMP) for n in GRID}
    intra, cross = [], []
    for a, b in itertools.combinations(GRID, 2):
        (intra if a.split()[0] == b.split()[0] else cross).append(emb[a] @ emb[b])
    assert np.mean(intra) > np.mean(cross)


def test_compositional_errors():
    with pytest.raises(EncoderError):
        encode_category("circle", COMP)
    with pytest.raises(EncoderError):
        encode_category("", COMP)
    spec = EncoderSpec("Compositional", vocabulary=("red", "circle"))
    with pytest.raises(EncoderError, match="unknown token"):
        encode_category("red square", spec)


def test_hashed_has_no_compositional_structure():
    a, b = encode_category("red circle", HASH), encode_category("red square", HASH)
    assert abs(a @ b) < 0.5
    assert not np.allclose(encode_category("red circle", HASH), encode_category("red circle", COMP))


def test_external_adapter():
    seen = []

    def fake(text):
        seen.append(text)
        return np.arange(1, 9, dtype=float)

    register_adapter("fake", fake)
    try:
        spec = EncoderSpec("External", d=8, adapter="fake", prompt_template="an image of {name}")
        v = encode_category("kelp", spec)
        assert seen == ["an image of kelp"]
        assert abs(np.linalg.norm(v) - 1) < 1e-12
    finally:
        unregister_adapter("fake")
    with pytest.raises(EncoderError, match="not registered"):
        encode_category("kelp", EncoderSpec("External", d=8, adapter="fake"))


def test_bank_rows_equal_individual_encodings():
    bank = build_prototype_bank(GRID, COMP)
    for i, n in enumerate(GRID):
        np.testing.assert_array_equal(bank.matrix[i], encode_category(n, COMP))
    assert bank.categories == tuple(GRID)
    np.testing.assert_allclose(np.einsum("ij,ij->i", bank.matrix, bank.matrix), 1, atol=1e-6)


def test_single_category_bank():
    bank = build_prototype_bank(["red circle"], COMP)
    assert bank.matrix.shape == (1, 64)


def test_six_name_bank():
    names = ["Cephalopoda", "Holothuroidea", "Asteroidea", "Demospongiae", "Mammalia", "Scyphozoa"]
    bank = build_prototype_bank(names, HASH)
    assert bank.matrix.shape == (6, 64)


def test_duplicate_names_rejected():
    with pytest.raises(EncoderError, match="duplicate"):
        build_prototype_bank(["red circle", "red circle"], COMP)
    with pytest.raises(EncoderError):
        build_prototype_bank([], COMP)


def test_frozen_bank_rejects_mutation():
    bank = build_prototype_bank(GRID, COMP, include_background=True)
    with pytest.raises(FrozenBankError):
        bank.matrix = np.zeros((16, 64))
    with pytest.raises((ValueError, TypeError)):
        bank.matrix[0, 0] = 3.0


def test_background_row_is_last_and_unit():
    bank = build_prototype_bank(GRID, COMP, include_background=True)
    full = bank.full_matrix()
    assert full.shape == (17, 64)
    assert abs(np.linalg.norm(full[-1]) - 1) < 1e-6


def test_swap_carries_background():
    bank = build_prototype_bank(GRID[:8], COMP, include_background=True).with_background(np.ones(64) / 8.0)
    new = swap_vocabulary(bank, GRID[8:])
    assert new.categories == tuple(GRID[8:])
    np.testing.assert_array_equal(new.background, bank.background)
    single = swap_vocabulary(bank, ["red circle"])
    assert single.matrix.shape == (1, 64)
    with pytest.raises(EncoderError):
        swap_vocabulary(bank, [])


def test_swap_scales_linearly():
    names = [f"sp{k}" for k in range(790)]
    bank = swap_vocabulary(build_prototype_bank(["x"], HASH), names)
    assert bank.matrix.shape == (790, 64)
    assert bank.matrix.nbytes == 790 * 64 * bank.matrix.itemsize


def test_bank_file_round_trip(tmp_path):
    bank = build_prototype_bank(GRID, COMP, include_background=True)
    p = bank.save(tmp_path / "b.bin")
    again = PrototypeBank.load(p)
    assert again.categories == bank.categories
    np.testing.assert_allclose(again.matrix, bank.matrix, atol=1e-7)
    assert again.save(tmp_path / "c.bin").read_bytes() == p.read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(GRID), st.floats(1e-3, 1e3), st.integers(0, 50))
def test_cosine_is_scale_invariant(name, scale, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(64)
    p = encode_category(name, COMP)
    c1 = v @ p / np.linalg.norm(v)
    c2 = (scale * v) @ p / np.linalg.norm(scale * v)
    assert abs(c1 - c2) < 1e-9
    assert abs(p @ p - 1) < 1e-6


def test_transformer_interface():
    enc = TextPrototypeEncoder(kind="Compositional", d=32).fit(GRID)
    X = enc.transform(GRID[:3])
    assert X.shape == (3, 32)
    assert enc.get_params()["d"] == 32
    assert enc.vocabulary_ == tuple(sorted(set(COLORS + SHAPES)))
