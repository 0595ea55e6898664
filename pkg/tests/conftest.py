import json
from pathlib import Path

import numpy as np
import pytest

from ovdet.datakit import SynthConfig, gen_synthetic
from ovdet.taxonomy import CategoryRecord, TaxonomyRegistry

# 26-class, 821-category registry with 31 undefined records, shaped so the
# three split rules land on 613/177 (IntraClass), 572/183 (InterClass) and
# 20/6 (ClassLevel).
UNSEEN_CLASSES = {
    "Cephalopoda": 40,
    "Holothuroidea": 30,
    "Asteroidea": 35,
    "Demospongiae": 25,
    "Mammalia": 27,
    "Scyphozoa": 20,
}
SEEN_CLASSES = {
    "Actinopterygii": 250,
    "Malacostraca": 80,
    "Gastropoda": 70,
    "Anthozoa": 51,
    "Bivalvia": 43,
    "Chondrichthyes": 35,
    "Reptilia": 25,
    "Echinoidea": 24,
    **{f"Minorclass{i:02d}": 3 for i in range(11)},
    "Minorclass11": 2,
}
N_UNDEFINED = 31


def ref_shaped_records() -> list[dict]:
    recs = []
    for cls, n in {**SEEN_CLASSES, **UNSEEN_CLASSES}.items():
        for k in range(n):
            recs.append(
                {
                    "name": f"{cls.lower()} sp{k:03d}",
                    "common_name": None,
                    "kingdom": "Animalia",
                    "phylum": "Phylum" + cls[:3],
                    "class": cls,
                    "order": None,
                    "family": None,
                    "genus": None,
                    "species": f"{cls.lower()} sp{k:03d}",
                }
            )
    for k in range(N_UNDEFINED):
        recs.append({"name": f"undefined object {k:02d}", "common_name": None})
    return recs


@pytest.fixture(scope="session")
def ref_taxonomy_file(tmp_path_factory) -> Path:
    p = tmp_path_factory.mktemp("tax") / "ref_shaped.json"
    p.write_text(json.dumps(ref_shaped_records()), encoding="utf-8")
    return p


@pytest.fixture(scope="session")
def ref_registry(ref_taxonomy_file):
    from ovdet.taxonomy import load_taxonomy

    return load_taxonomy(ref_taxonomy_file)


@pytest.fixture
def small_registry():
    """Three classes of sizes 5, 4 and 3."""
    recs = []
    for cls, n in (("A", 5), ("B", 4), ("C", 3)):
        for k in range(n):
            recs.append(CategoryRecord(f"{cls.lower()}{k}", None, {"Class": cls}))
    return TaxonomyRegistry(recs)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """2 colours x 2 shapes, 10 images per composition."""
    cfg = SynthConfig(
        colors={"red": (220, 40, 40), "blue": (50, 90, 230)},
        shapes=("circle", "square"),
        images_per_category=10,
        seed=3,
    )
    out, index, reg = gen_synthetic(cfg, tmp_path_factory.mktemp("synth") / "ds")
    return out, index, reg, cfg


def rand_unit(rng: np.random.Generator, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


SMALL_DETECTOR = dict(backbone_channels=(16, 24, 32, 48), head_dim=128, pool_size=5, cls_temperature=0.07)


@pytest.fixture(scope="session")
def trained_small(synth_small, tmp_path_factory):
    """A detector fine-tuned from scratch on the 2x2 synthetic set; returns (checkpoint, train, val)."""
    from ovdet.datakit import load_annotations, train_val_split
    from ovdet.detector import DetectorConfig
    from ovdet.pipeline import Phase, RunConfig, load_checkpoint, run_finetune
    from ovdet.textspace import EncoderSpec

    out, *_ = synth_small
    M = 400
    rc = RunConfig(
        phase=Phase.FINETUNE,
        output_dir=str(tmp_path_factory.mktemp("trained") / "run"),
        annotations=str(out / "annotations.json"),
        encoder=EncoderSpec("Compositional", d=64, seed=0),
        detector=DetectorConfig(**SMALL_DETECTOR),
        lr_schedule=[(round(0.7 * M), 0.02), (M, 0.002)],
        max_steps=M,
        from_scratch_ablation=True,
    )
    ckpt = load_checkpoint(run_finetune(rc))
    train, val = train_val_split(load_annotations(out / "annotations.json"), 0.8, 0)
    return ckpt, train, val


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test decides")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    ok, details = item.config._criteria.get(mark.args[0], (True, []))
    details = details + [v for k, v in item.user_properties if k == "detail"]
    item.config._criteria[mark.args[0]] = (ok and rep.passed, details)


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria):
        ok, details = config._criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for d in details:
            terminalreporter.write_line(f"    {d}")
