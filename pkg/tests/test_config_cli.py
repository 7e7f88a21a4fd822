import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acl_lab.cli import main
from acl_lab.config import SCHEMA, build_config, config_to_text, parse_config, with_overrides
from acl_lab.data import LabeledData, read_dataset_csv, write_dataset_csv
from acl_lab.encoder import load_checkpoint, save_checkpoint
from acl_lab.errors import ConfigError
from acl_lab.training import read_records

SMALL = """
[experiment]
epochs = 3
seed = 1
output_dir = {out}

[loss]
alpha = 0.3
tau = 0.2

[dataset]
n_per_class = 20
dim = 6

[encoder]
hidden = 16
d_h = 8
d_z = 4
head_hidden = 32

[optimizer]
batch_size = 16
"""


def write_cfg(tmp_path, text=None, name="c.ini"):
    p = tmp_path / name
    p.write_text(text if text is not None else SMALL.format(out=tmp_path / "run"))
    return p


def test_missing_alpha_names_field(tmp_path, capsys):
    text = SMALL.format(out=tmp_path).replace("alpha = 0.3\n", "")
    code = main(["train", str(write_cfg(tmp_path, text))])
    assert code == 2
    assert "loss.alpha" in capsys.readouterr().err


@pytest.mark.parametrize("edit, field", [
    (("tau = 0.2", "tau = 0"), "loss.tau"),
    (("tau = 0.2", "tau = abc"), "loss.tau"),
    (("alpha = 0.3", "alpha = 1.5"), "loss.alpha"),
    (("dim = 6", "dim = 6\nbogus = 1"), "dataset.bogus"),
    (("[optimizer]", "[optimiser]"), "optimiser"),
    (("epochs = 3", "epochs = 0"), "experiment.epochs"),
])
def test_config_errors_carry_field_and_line(tmp_path, edit, field):
    text = SMALL.format(out=tmp_path).replace(*edit)
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    assert info.value.line is not None
    assert field in str(info.value)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200))
def test_config_parsing_is_total(text):
    try:
        parse_config(text)
    except ConfigError:
        pass


def test_config_round_trip(tmp_path):
    cfg = parse_config(SMALL.format(out=tmp_path) + "\n[metrics]\nt = 0.1\n")
    again = parse_config(config_to_text(cfg))
    assert again == cfg and again.values == cfg.values
    assert config_to_text(again) == config_to_text(cfg)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0, 1), tau=st.floats(1e-3, 10), t=st.floats(1e-3, 100), seed=st.integers(0, 2**63 - 1),
       hidden=st.lists(st.integers(1, 64), min_size=1, max_size=3))
def test_config_round_trip_property(alpha, tau, t, seed, hidden):
    cfg = parse_config("[loss]\nalpha = 0.5\ntau = 1\n")
    cfg = cfg.replace(loss__alpha=alpha, loss__tau=tau, metrics__t=t, experiment__seed=seed,
                      encoder__hidden=tuple(hidden))
    assert parse_config(config_to_text(cfg)) == cfg


def test_m_g_accepts_pi_expressions():
    cfg = parse_config("[loss]\nalpha = 0.3\ntau = 0.2\nm_g = pi/4\n")
    assert cfg.loss.m_g == math.pi / 4
    assert cfg.get("metrics.t") == 2.0


def test_only_seed_and_output_dir_override(tmp_path):
    cfg = parse_config(SMALL.format(out=tmp_path))
    o = with_overrides(cfg, seed=9, output_dir="x")
    assert o.seed == 9 and o.output_dir == "x"
    assert {k for k in cfg.values if cfg.values[k] != o.values[k]} == {"experiment.seed", "experiment.output_dir"}


def test_schema_defaults_complete():
    cfg = parse_config("[loss]\nalpha = 0.3\ntau = 0.2\n")
    assert set(cfg.values) == {f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys}


def test_metrics_identical_embeddings(tmp_path, capsys):
    data = LabeledData(np.tile([[0.3, -1.2, 2.0]], (10, 1)), np.zeros(10, dtype=int))
    write_dataset_csv(data, tmp_path / "emb.csv")
    code = main(["metrics", str(tmp_path / "emb.csv"), "--t", "2", "--output", str(tmp_path / "m.csv")])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "step,uniformity,tolerance,t,probe_acc"
    row = lines[1].split(",")
    assert float(row[1]) == 0.0 and float(row[2]) == 1.0
    assert (tmp_path / "m.csv").read_text().strip().splitlines() == lines


def test_train_twice_byte_identical(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    outs = []
    for threads, name in (("1", "a"), ("", "b")):
        monkeypatch.setenv("ACL_LAB_THREADS", threads)
        assert main(["train", str(cfg), "--output-dir", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    for f in ("records.csv", "checkpoint.acl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    echoed = parse_config(manifest["config"])
    assert echoed == with_overrides(parse_config(cfg.read_text()), output_dir=str(outs[0]))
    for key in ("version", "started", "finished", "final", "checkpoint", "artifact_choices"):
        assert key in manifest
    recs = read_records(outs[0] / "records.csv")
    assert [r.epoch for r in recs] == [0, 1, 2, 3]


def test_seed_override_changes_run(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["train", str(cfg), "--output-dir", str(tmp_path / "a")])
    main(["train", str(cfg), "--output-dir", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a/records.csv").read_bytes() != (tmp_path / "b/records.csv").read_bytes()


def test_records_csv_round_trip_full_precision(tmp_path):
    main(["train", str(write_cfg(tmp_path))])
    path = tmp_path / "run/records.csv"
    recs = read_records(path)
    lines = path.read_text().splitlines()[1:]
    for r, line in zip(recs, lines):
        assert ",".join(r.csv_row()) == line


def test_checkpoint_round_trip_bit_exact(tmp_path):
    main(["train", str(write_cfg(tmp_path))])
    params = load_checkpoint(tmp_path / "run/checkpoint.acl")
    save_checkpoint(params, tmp_path / "again.acl")
    assert (tmp_path / "again.acl").read_bytes() == (tmp_path / "run/checkpoint.acl").read_bytes()


def test_gen_data_and_probe(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["gen-data", str(cfg)]) == 0
    data = read_dataset_csv(tmp_path / "run/dataset.csv")
    assert data.x.shape == (80, 6)
    assert main(["train", str(cfg)]) == 0
    code = main(["probe", str(tmp_path / "run/checkpoint.acl"), str(tmp_path / "run/dataset.csv"),
                 "--output-dir", str(tmp_path / "probe")])
    assert code == 0
    assert "probe accuracy" in capsys.readouterr().out
    rows = (tmp_path / "probe/class_wise.csv").read_text().splitlines()
    assert rows[0] == "class,accuracy" and rows[-1].startswith("macro,")


def test_probe_dim_mismatch_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["train", str(cfg)])
    write_dataset_csv(LabeledData(np.ones((8, 3)), np.arange(8) % 2), tmp_path / "bad.csv")
    assert main(["probe", str(tmp_path / "run/checkpoint.acl"), str(tmp_path / "bad.csv")]) == 3


def test_data_errors_exit_3(tmp_path):
    (tmp_path / "junk.csv").write_text("nope\n")
    assert main(["metrics", str(tmp_path / "junk.csv")]) == 3
    assert main(["probe", str(tmp_path / "missing.acl"), str(tmp_path / "junk.csv")]) == 3
    text = SMALL.format(out=tmp_path / "r") + "\n" + "\n".join(["[dataset]"])
    cfg = write_cfg(tmp_path, SMALL.format(out=tmp_path / "r").replace("dim = 6", "dim = 6\nkind = csv\npath = /nonexistent.csv"))
    assert main(["train", str(cfg)]) == 3


def test_divergence_exits_4(tmp_path, capsys):
    text = SMALL.format(out=tmp_path / "r").replace("[optimizer]", "[optimizer]\nkind = sgd\nlr = 1e300")
    assert main(["train", str(write_cfg(tmp_path, text))]) == 4
    assert "epoch" in capsys.readouterr().err


def test_sweep_writes_csv(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["sweep", str(cfg), "--axis", "tau", "--values", "0.2,1.0"]) == 0
    rows = (tmp_path / "run/sweep_tau.csv").read_text().splitlines()
    assert rows[0] == "axis,value,method,alpha,tau,uniformity,tolerance,probe_acc"
    assert len(rows) == 5
    assert main(["sweep", str(cfg), "--values", "x"]) == 2
