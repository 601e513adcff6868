import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from byols.cli import EXIT_CODES, main
from byols.config import STANDARD_RATIOS, STANDARD_WINDOWS_S, ConfigError, config_from_dict, expand_sweep, load_config
from byols.corpus import (
    ManifestError,
    SyntheticTaskSpec,
    generate_synthetic_corpus,
    load_manifest,
    read_events,
)
from byols.frontend import read_wav

# --- manifests ----------------------------------------------------------------


def _touch(d: Path, *names):
    for n in names:
        (d / n).write_bytes(b"")


def test_manifest_rows_in_file_order(tmp_path):
    _touch(tmp_path, "a.wav", "b.wav", "c.wav")
    (tmp_path / "m.csv").write_text("path,id,label\nc.wav,z,x\na.wav,y,\nb.wav,x,q\n")
    m = load_manifest(tmp_path / "m.csv")
    assert [r.id for r in m.records] == ["z", "y", "x"]
    assert m.records[0].path == (tmp_path / "c.wav").resolve()
    assert m.records[1].label is None and m.labels() == ["q", "x"]


@pytest.mark.parametrize(
    "text,match",
    [
        ("", "empty manifest"),
        ("path,id\n", "empty manifest"),
        ("path,id\na.wav,dup\na.wav,dup\n", "line 3: duplicate id 'dup'"),
        ("path,id\nmissing.wav,k\n", "line 2: missing file"),
        ("path,id,extra\na.wav,k,1\n", "unknown column"),
        ("path\na.wav\n", "missing column"),
        ("path,id,split\na.wav,k,holdout\n", "line 2: unknown split"),
        ("path,id\na.wav,k,surplus\n", "line 2: malformed"),
    ],
)
def test_manifest_errors(tmp_path, text, match):
    _touch(tmp_path, "a.wav")
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(ManifestError, match=match):
        load_manifest(tmp_path / "m.csv")


def test_malformed_event_file(tmp_path):
    (tmp_path / "e.jsonl").write_text('{"onset": 0.1, "offset": 0.5, "label": "a"}\n{"onset": 1}\n')
    with pytest.raises(ManifestError, match=":2:"):
        read_events(tmp_path / "e.jsonl")


# --- synthetic corpora ------------------------------------------------------------


def _digest(d: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(d).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_corpus_byte_identical(tmp_path):
    spec = SyntheticTaskSpec("chord_chroma", 6, 0.5, 3, 10.0, seed=7)
    generate_synthetic_corpus(spec, tmp_path / "a")
    generate_synthetic_corpus(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_tone_corpus_balanced(tmp_path):
    m = load_manifest(generate_synthetic_corpus(SyntheticTaskSpec("tone_pitch_class", 100, 0.3, 4), tmp_path))
    assert len(m) == 100 and len(list((tmp_path / "audio").glob("*.wav"))) == 100
    labels = [r.label for r in m.records]
    assert {c: labels.count(c) for c in set(labels)} == {"c0": 25, "c1": 25, "c2": 25, "c3": 25}
    splits = [r.split for r in m.records]
    assert splits.count("train") == 60 and splits.count("val") == 20 and splits.count("test") == 20


def test_event_onsets_coincide_with_energy_rise(tmp_path):
    m = load_manifest(generate_synthetic_corpus(SyntheticTaskSpec("event_onsets", 8, 4.0, 3, 30.0, seed=1), tmp_path))
    n_events = 0
    for r in m.records:
        x = read_wav(r.path).samples
        hop = 160  # 10 ms energy envelope
        env = np.array([np.mean(x[i : i + hop] ** 2) for i in range(0, len(x) - hop + 1, hop)])
        floor = np.median(env[env < np.percentile(env, 30)])
        for e in r.events:
            k = int(round(e.onset * 100))
            before = env[max(0, k - 5) : k].mean()
            after = env[k + 2 : k + 7].mean()
            assert after > 20 * max(before, floor), (r.id, e)
            n_events += 1
    assert n_events >= 8


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec("speech")
    with pytest.raises(ValueError):
        SyntheticTaskSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(clip_s=0)


# --- config ------------------------------------------------------------------------

BASE = {"corpus": {"synthetic": {"task": "tone_pitch_class", "n_clips": 8}}}


def test_config_defaults_and_hash():
    cfg = config_from_dict(BASE)
    assert cfg.trainer.learning_rate == 3e-4 and cfg.augmentation.window_s == 0.95
    assert cfg.config_hash() == config_from_dict(BASE).config_hash()
    other = config_from_dict({**BASE, "seed": 1})
    assert other.config_hash() != cfg.config_hash()
    moved = config_from_dict({**BASE, "output_dir": "elsewhere"})
    assert moved.config_hash() == cfg.config_hash()


@pytest.mark.parametrize(
    "patch",
    [
        {"trainer": {"learing_rate": 1e-3}},
        {"unknown_section": {}},
        {"encoder": {"arch": "Transformer"}},
        {"frontend": {"sample_rate": 22050}},
        {"trainer": {"alpha": -1}},
        {"embedding": {"mode": "clip"}},
        {"corpus": {"synthetic": {"task": "tone_pitch_class", "bogus": 1}}},
        {"corpus": {"manifest": "a.csv", "synthetic": {}}},
        {"heads": {"projector_width": 8}},
    ],
)
def test_config_rejects_bad_input(patch):
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, **patch})


def test_sweep_expansion():
    cfg = config_from_dict({**BASE, "sweep": {"ratios": [list(r) for r in STANDARD_RATIOS], "windows_s": list(STANDARD_WINDOWS_S)}})
    runs = expand_sweep(cfg)
    assert len(runs) == 28
    assert len({r.config_hash() for r in runs}) == 28
    assert sorted({(r.trainer.alpha, r.trainer.beta) for r in runs}) == sorted((float(a), float(b)) for a, b in STANDARD_RATIOS)
    frames = sorted({r.augmentation.build(0).segment_frames for r in runs})
    assert frames == [50, 96, 143, 200]


def test_load_config_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({**BASE, "trainer": {"epochs": 3}}))
    assert load_config(tmp_path / "c.yaml").trainer.epochs == 3
    (tmp_path / "bad.yaml").write_text("trainer: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


# --- CLI -----------------------------------------------------------------------------


def _cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_error_json(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("corpus: {synthetic: {task: tone_pitch_class}}\ntrainer: {batchsize: 4}\n")
    code, _, err = _cli(capsys, "run", "--config", tmp_path / "c.yaml")
    assert code == EXIT_CODES["config_error"] and json.loads(err)["error"] == "config_error"

    (tmp_path / "m.csv").write_text("path,id\n")
    code, _, err = _cli(capsys, "extract", "--ckpt", tmp_path / "none.byck", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "e")
    assert code == EXIT_CODES["io_error"] and json.loads(err)["error"] == "io_error"

    (tmp_path / "x.byck").write_bytes(b"garbage" * 10)
    code, _, err = _cli(capsys, "extract", "--ckpt", tmp_path / "x.byck", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "e")
    assert code == EXIT_CODES["checkpoint_error"] and "integrity" in json.loads(err)["message"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--task", "tone_pitch_class", "--n-clips", "40", "--clip-s", "1.0", "--out", str(d / "corpus")]) == 0
    cfg = {
        "seed": 0,
        "corpus": {"manifest": str(d / "corpus" / "manifest.csv")},
        "encoder": {"arch": "DefaultCnn", "width_multiplier": 0.0625},
        "trainer": {"batch_size": 8, "epochs": 1, "hybrid": True},
    }
    (d / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(d / "c.yaml"), "--corpus", str(d / "corpus" / "manifest.csv"), "--out", str(d / "ck")]) == 0
    return d


def test_cli_pipeline(trained, capsys):
    d = trained
    capsys.readouterr()
    assert (d / "ck" / "checkpoint.byck").is_file()
    log = [json.loads(x) for x in (d / "ck" / "train_log.jsonl").read_text().splitlines()]
    assert set(log[0]) == {"step", "epoch", "l_ss", "l_sup", "l_hybrid", "wall_time"}

    code, out, _ = _cli(capsys, "extract", "--ckpt", d / "ck" / "checkpoint.byck", "--manifest", d / "corpus" / "manifest.csv", "--out", d / "emb.emb1")
    assert code == 0 and json.loads(out)["records"] == 40
    assert (d / "emb.jsonl").is_file()

    code, out, _ = _cli(capsys, "probe", "--embeddings", d / "emb.emb1", "--labels", d / "corpus" / "manifest.csv", "--task", "scene", "--hidden", "--epochs", "50", "--report", d / "r.json")
    assert code == 0
    report = json.loads((d / "r.json").read_text())
    assert set(report) == {"task", "metrics", "config", "seed"} and 0 <= report["metrics"]["top1_accuracy"] <= 1

    code, _, err = _cli(capsys, "probe", "--embeddings", d / "emb.emb1", "--labels", d / "corpus" / "manifest.csv", "--task", "timestamp")
    assert code == EXIT_CODES["invalid_argument"]

    code, out, _ = _cli(capsys, "cka", "--ckpt-a", d / "ck" / "checkpoint.byck", "--ckpt-b", d / "ck" / "checkpoint.byck", "--manifest", d / "corpus" / "manifest.csv", "--out", d / "cka.json", "--csv", d / "cka.csv")
    assert code == 0
    m = json.loads((d / "cka.json").read_text())
    assert np.allclose(np.diag(m["values"]), 1.0, atol=1e-6)

    code, out, _ = _cli(capsys, "features", "--manifest", d / "corpus" / "manifest.csv", "--out", d / "f.csv")
    assert code == 0 and len((d / "f.csv").read_text().splitlines()) == 41


def test_cli_resume(trained, capsys):
    d = trained
    cfg = yaml.safe_load((d / "c.yaml").read_text())
    cfg["trainer"]["epochs"] = 2
    (d / "c2.yaml").write_text(yaml.safe_dump(cfg))
    # the resumed run keeps the checkpointed trainer config (1 epoch), so nothing remains to do
    code, out, _ = _cli(capsys, "train", "--config", d / "c2.yaml", "--corpus", d / "corpus" / "manifest.csv", "--out", d / "ck2", "--resume", d / "ck" / "checkpoint.byck")
    assert code == 0 and json.loads(out)["epoch"] == 1
