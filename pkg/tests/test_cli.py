import json

import pytest

from ovdet import cli
from ovdet.attribgen import ENV_API_KEY, ENV_BASE_URL, FIXTURE_MODEL, install_fixture
from ovdet.detector import DetectorConfig
from ovdet.evalkit import Detection, write_results
from ovdet.pipeline import Phase, RunConfig, load_checkpoint
from ovdet.taxonomy import Protocol, SplitParams, gen_split, load_taxonomy
from ovdet.textspace import EncoderSpec

TINY = DetectorConfig(backbone_channels=(8, 8, 16, 16), head_dim=32, pool_size=3, feature_dim=32)


def run(argv, capsys):
    code = cli.main([*argv, "--json"])
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def synth_default(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.main(["synth", "--out", str(out)]) == 0
    return out


# --------------------------------------------------------------------------
# synth / split


def test_synth_default_has_nine_categories(synth_default, capsys):
    manifest = json.loads((synth_default / "manifest.json").read_text())
    assert len(load_taxonomy(synth_default / "taxonomy.json")) == 9
    assert manifest


def test_synth_same_seed_identical_manifests(tmp_path, capsys):
    for name in ("a", "b"):
        code, out = run(["synth", "--out", str(tmp_path / name), "--seed", "7", "--images-per-category", "10"], capsys)
        assert code == 0 and len(out["artifacts"]) == 3
    for f in ("manifest.json", "annotations.json", "taxonomy.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_missing_parent_fails(tmp_path, capsys):
    code, out = run(["synth", "--out", str(tmp_path / "nope" / "ds")], capsys)
    assert code != 0 and out["summary"][0].startswith("error")


def test_synth_unknown_colour(tmp_path, capsys):
    code, _ = run(["synth", "--out", str(tmp_path / "ds"), "--colors", "red,mauve"], capsys)
    assert code == 2


def test_split_class_level_two_of_three(synth_default, tmp_path, capsys):
    tax = str(synth_default / "taxonomy.json")
    code, out = run(["split", "--taxonomy", tax, "--protocol", "ClassLevel", "--seen-classes", "circle,square", "--out", str(tmp_path / "s.json")], capsys)
    assert code == 0 and "2 seen / 1 unseen classes" in out["summary"][0]
    spec = json.loads((tmp_path / "s.json").read_text())
    assert spec["seen"] == ["circle", "square"] and spec["unseen"] == ["triangle"]


def test_split_intra_class_is_union_of_class_buckets(synth_default, tmp_path, capsys):
    tax = str(synth_default / "taxonomy.json")
    (tmp_path / "seen.txt").write_text("circle\nsquare\n")
    code, _ = run(["split", "--taxonomy", tax, "--protocol", "IntraClass", "--seen-classes", "@" + str(tmp_path / "seen.txt"), "--out", str(tmp_path / "i.json")], capsys)
    assert code == 0
    intra = json.loads((tmp_path / "i.json").read_text())
    reg = load_taxonomy(tax)
    members = {c: set(names) for c, names in reg.class_index.items()}
    assert set(intra["unseen"]) | set(intra["seen"]) == set().union(*members.values())
    assert set(intra["seen"]) <= members["circle"] | members["square"]


def test_split_unknown_protocol_is_usage_error(synth_default, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["split", "--taxonomy", str(synth_default / "taxonomy.json"), "--protocol", "Sideways", "--out", str(tmp_path / "s.json")])
    assert exc.value.code == 2


# --------------------------------------------------------------------------
# pretrain / finetune / predict


def _config(synth_small, tmp_path, phase, finetune=False):
    rc = RunConfig(
        phase=phase,
        output_dir=str(tmp_path / phase.value.lower()),
        annotations=str(synth_small[0] / "annotations.json"),
        encoder=EncoderSpec("Compositional", d=32),
        detector=TINY,
        lr_schedule=[(10, 0.02)],
        max_steps=2,
        batch_size=4,
    )
    path = tmp_path / f"{'finetune' if finetune else phase.value.lower()}.json"
    data = rc.to_json() | ({"phase": "Finetune"} if finetune else {})
    path.write_text(json.dumps(data))
    return path


def test_pretrain_lists_checkpoint_and_metrics(synth_small, tmp_path, capsys):
    code, out = run(["pretrain", "--config", str(_config(synth_small, tmp_path, Phase.PRETRAIN))], capsys)
    assert code == 0
    assert out["artifacts"][0].endswith("final.ckpt") and out["artifacts"][1].endswith("metrics.jsonl")
    assert "step 1" in out["summary"][1]


def test_pretrain_zero_steps_equals_init(synth_small, tmp_path, capsys):
    code, out = run(["pretrain", "--config", str(_config(synth_small, tmp_path, Phase.PRETRAIN)), "--max-steps", "0"], capsys)
    assert code == 0 and out["summary"][1] == "no steps run"
    d = tmp_path / "pretrain"
    assert (d / "final.ckpt").read_bytes() == (d / "init.ckpt").read_bytes()


def test_finetune_without_checkpoint_refused(synth_small, tmp_path, capsys):
    cfg = _config(synth_small, tmp_path, Phase.PRETRAIN, finetune=True)
    code, out = run(["finetune", "--config", str(cfg)], capsys)
    assert code != 0 and "checkpoint_in" in out["summary"][0]
    code, out = run(["finetune", "--config", str(cfg), "--from-scratch"], capsys)
    assert code == 0, out
    assert load_checkpoint(out["artifacts"][0]).phase is Phase.FINETUNE


def test_finetune_then_predict(synth_small, tmp_path, capsys):
    pre = _config(synth_small, tmp_path, Phase.PRETRAIN)
    _, out = run(["pretrain", "--config", str(pre)], capsys)
    cfg = _config(synth_small, tmp_path, Phase.PRETRAIN, finetune=True)
    code, ft = run(["finetune", "--config", str(cfg), "--checkpoint", out["artifacts"][0]], capsys)
    assert code == 0
    ann = str(synth_small[0] / "annotations.json")
    code, pr = run(["predict", "--checkpoint", ft["artifacts"][0], "--annotations", ann, "--categories", "red circle,green square", "--out", str(tmp_path / "dets.json")], capsys)
    assert code == 0 and pr["artifacts"] == [str(tmp_path / "dets.json")]
    cats = {d["category"] for d in json.loads((tmp_path / "dets.json").read_text())}
    assert cats <= {"red circle", "green square"}


# --------------------------------------------------------------------------
# eval


@pytest.fixture
def eval_inputs(synth_small, tmp_path):
    out, index, reg, _ = synth_small
    split = gen_split(reg, Protocol.HELD_OUT, SplitParams(unseen_categories=["red circle"]))
    dets = [Detection(im.image_id, im.dominant_category, b.as_tuple(), 1.0) for im in index.images for b in im.boxes]
    return {
        "results": write_results(dets, tmp_path / "perfect.json"),
        "annotations": out / "annotations.json",
        "split": split.save(tmp_path / "split.json"),
        "dets": dets,
    }


def _eval_args(inp, results=None):
    return ["eval", "--results", str(results or inp["results"]), "--annotations", str(inp["annotations"]), "--split", str(inp["split"])]


def test_eval_perfect_table_is_all_hundred(eval_inputs, tmp_path, capsys):
    code, out = run([*_eval_args(eval_inputs), "--table", "--out", str(tmp_path / "res.json")], capsys)
    assert code == 0
    assert out["summary"][0].startswith("mAP50 seen 100.0 unseen 100.0 all 100.0")
    row = next(ln for ln in out["summary"] if "Ours" in ln)
    cells = [c.strip() for c in row.strip("|").split("|")[1:]]
    assert cells and all(c == "100.0" for c in cells)
    assert json.loads((tmp_path / "res.json").read_text())["map50_all"] == 1.0


def test_eval_strict_stray_category(eval_inputs, tmp_path, capsys):
    stray = write_results([*eval_inputs["dets"], Detection(eval_inputs["dets"][0].image_id, "ghost", (0, 0, 5, 5), 0.5)], tmp_path / "stray.json")
    code, out = run(_eval_args(eval_inputs, stray), capsys)
    assert code == 0 and any("ghost" in ln for ln in out["summary"])
    code, _ = run([*_eval_args(eval_inputs, stray), "--strict"], capsys)
    assert code == 1


def test_eval_plot_writes_pngs(eval_inputs, tmp_path, capsys):
    code, out = run([*_eval_args(eval_inputs), "--plot", str(tmp_path / "pr")], capsys)
    assert code == 0 and len(out["artifacts"]) == 4
    assert all(p.endswith(".png") for p in out["artifacts"])


# --------------------------------------------------------------------------
# attrgen


def test_attrgen_replay_fixture(tmp_path, capsys):
    code, out = run(["attrgen", "--fixture", "--cache", str(tmp_path / "c"), "--out", str(tmp_path / "t.json")], capsys)
    assert code == 0 and out["artifacts"] == [str(tmp_path / "t.json")]
    assert "30 names" in out["summary"][0]
    assert len(load_taxonomy(tmp_path / "t.json")) == 30


def test_attrgen_live_without_credentials_is_actionable(monkeypatch, tmp_path, capsys):
    monkeypatch.delenv(ENV_API_KEY, raising=False)
    monkeypatch.delenv(ENV_BASE_URL, raising=False)
    (tmp_path / "names.txt").write_text("Aurelia aurita\n")
    code, out = run(["attrgen", str(tmp_path / "names.txt"), "--mode", "live", "--cache", str(tmp_path / "c"), "--out", str(tmp_path / "t.json")], capsys)
    assert code != 0 and ENV_API_KEY in out["summary"][0]


def test_attrgen_dedup_collapses_case_duplicates(tmp_path, capsys):
    names = install_fixture(tmp_path / "c")
    (tmp_path / "names.txt").write_text("\n".join([*names[:4], names[0].upper(), names[1].lower()]))
    code, out = run(["attrgen", str(tmp_path / "names.txt"), "--cache", str(tmp_path / "c"), "--model", FIXTURE_MODEL, "--dedup", "--out", str(tmp_path / "t.json")], capsys)
    assert code == 0 and "dropped 2" in out["summary"][1]
    assert len(load_taxonomy(tmp_path / "t.json")) == 4


# --------------------------------------------------------------------------
# help and idempotence


COMMANDS = ["synth", "split", "pretrain", "finetune", "predict", "eval", "attrgen", "benchmark"]


@pytest.mark.parametrize("command", COMMANDS)
def test_help_documents_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = next(a for a in cli.build_parser()._subparsers._group_actions[0].choices.items() if a[0] == command)[1]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        if not action.option_strings:
            assert action.dest in text
        assert action.help


def test_split_is_idempotent(synth_default, tmp_path, capsys):
    args = ["split", "--taxonomy", str(synth_default / "taxonomy.json"), "--protocol", "InterClass", "--block", "2"]
    for name in ("a", "b"):
        assert cli.main([*args, "--out", str(tmp_path / f"{name}.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
