import csv
import json
import re
import xml.etree.ElementTree as ET

import pytest

from actsparse.cli import (
    EXIT_CONFIG_MALFORMED,
    EXIT_CONFIG_NOT_FOUND,
    EXIT_MISSING_FILE,
    EXIT_USAGE,
    EXIT_VERIFY_FAILED,
    LEMMA_HEADER,
    THEOREM_HEADER,
    main,
)
from actsparse.plot import collect_series, render_svg
from actsparse.train import REPORT_HEADER

SVG_NS = "{http://www.w3.org/2000/svg}"


def write_cfg(path, **over):
    raw = {"name": "rf", "model": {"hidden": [16, 16]},
           "data": {"kind": "random_finite", "dim": 12, "num_classes": 3, "n": 200},
           "epochs": 2, "batch_size": 20, "record_every": 3}
    raw.update(over)
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def mnist_cfg(tmp_path, mnist_paths):
    images, labels = mnist_paths
    return write_cfg(tmp_path / "mnist.json", name="mn", model={"hidden": [32]},
                     data={"kind": "mnist", "images": images, "labels": labels, "limit": 600},
                     epochs=1, batch_size=50)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_train_mlp_outputs(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "report.csv")
    assert tuple(rows[0]) == REPORT_HEADER
    assert {r[2] for r in rows[1:] if r[3] == "nonzero_fraction"} == {"0", "1"}
    assert (tmp_path / "o" / "nonzero_fraction.svg").exists()
    assert json.loads((tmp_path / "o" / "config.json").read_text())["name"] == "rf"


def test_train_is_byte_reproducible(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    for d in ("a", "b"):
        assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / d), "--seed", "7"]) == 0
    for f in ("report.csv", "preact_hist.csv", "config.json", "nonzero_fraction.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 7


def test_fast_caps_epochs(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", epochs=50)
    assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / "o"), "--fast"]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["epochs"] == 20


def test_exit_codes(tmp_path, capsys):
    assert main(["train-mlp", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG_NOT_FOUND
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x", "epochz": 3}')
    assert main(["train-mlp", "--config", str(bad)]) == EXIT_CONFIG_MALFORMED
    bad.write_text("{")
    assert main(["train-mlp", "--config", str(bad)]) == EXIT_CONFIG_MALFORMED
    enc = write_cfg(tmp_path / "enc.json")
    assert main(["train-encoder", "--config", enc]) == EXIT_CONFIG_MALFORMED
    nofile = write_cfg(tmp_path / "nofile.json", data={"kind": "mnist", "images": str(tmp_path / "x"),
                                                       "labels": str(tmp_path / "y")})
    assert main(["train-mlp", "--config", nofile, "--out", str(tmp_path / "o")]) == EXIT_MISSING_FILE
    assert main(["plot", "--report", str(tmp_path / "none.csv"), "--metric", "ece"]) == EXIT_MISSING_FILE
    with pytest.raises(SystemExit) as info:
        main(["train-mlp", "--config", enc, "--bogus"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE
    codes = {EXIT_CONFIG_NOT_FOUND, EXIT_CONFIG_MALFORMED, EXIT_MISSING_FILE, EXIT_USAGE}
    assert len(codes) == 4 and 0 not in codes


def test_train_encoder(tmp_path):
    cfg = write_cfg(tmp_path / "e.json", model={"type": "encoder", "d_model": 8, "d_ff": 16, "blocks": 2},
                    data={"kind": "sequence", "n": 40, "num_classes": 2, "max_len": 5, "min_len": 3},
                    epochs=1, batch_size=10)
    assert main(["train-encoder", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "report.csv")
    assert {r[2] for r in rows[1:] if r[3] == "nonzero_fraction"} == {"0", "1"}


def test_verify_theorem(tmp_path):
    assert main(["verify-theorem", "--loss", "mse", "--trials", "3", "--samples", "20000",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "theorem_report.csv")
    assert tuple(rows[0]) == THEOREM_HEADER
    assert len(rows) == 4
    for r in rows[1:]:
        d = dict(zip(THEOREM_HEADER, r))
        assert float(d["mean"]) > 3 * float(d["se"])
        assert abs(float(d["mean"]) - float(d["closed_form"])) < 5 * float(d["se"])
        assert d["verdict"] == "1"


def test_verify_theorem_rejects_too_few_samples(tmp_path):
    assert main(["verify-theorem", "--trials", "1", "--samples", "10", "--out", str(tmp_path)]) == EXIT_USAGE


def test_failed_verdict_exits_nonzero(tmp_path, monkeypatch):
    import actsparse.cli as cli
    from actsparse.theory import LemmaResult, MonteCarloResult

    monkeypatch.setattr(cli, "theorem1_mc", lambda cfg: MonteCarloResult(-1.0, 0.1, cfg.samples))
    assert main(["verify-theorem", "--loss", "ce", "--trials", "2", "--out", str(tmp_path)]) == EXIT_VERIFY_FAILED
    rows = read_csv(tmp_path / "theorem_report.csv")
    assert [r[-1] for r in rows[1:]] == ["0", "0"]
    monkeypatch.setattr(cli, "lemma_d1_check", lambda params, rtol: LemmaResult(0.0, 1.0, 0.0))
    assert main(["verify-lemma", "--out", str(tmp_path)]) == EXIT_VERIFY_FAILED


def test_verify_lemma(tmp_path):
    assert main(["verify-lemma", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "lemma_report.csv")
    assert tuple(rows[0]) == LEMMA_HEADER
    assert len(rows) == 82
    assert all(r[-1] == "1" for r in rows[1:])


def test_sweep_topk_identity_arm(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model={"hidden": [16]})
    assert main(["sweep", "--config", cfg, "--axis", "topk", "--values", "4,16", "--out", str(tmp_path / "s")]) == 0
    assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    sweep_rows = read_csv(tmp_path / "s" / "report.csv")[1:]
    base_rows = read_csv(tmp_path / "b" / "report.csv")[1:]
    full = [r[1:] for r in sweep_rows if r[0] == "rf/topk=16"]
    assert full == [r[1:] for r in base_rows]
    assert all(float(r[4]) <= 4 / 16 for r in sweep_rows if r[0] == "rf/topk=4" and r[3] == "nonzero_fraction")


def test_sweep_bad_values(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["sweep", "--config", cfg, "--axis", "width", "--values", "a,b", "--out", str(tmp_path)]) == EXIT_USAGE


def test_neuron_freq(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model={"hidden": [16]})
    assert main(["neuron-freq", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    detail = read_csv(tmp_path / "o" / "neuron_freq.csv")
    assert detail[0] == ["experiment", "layer", "rank", "neuron", "frequency"]
    freqs = [float(r[4]) for r in detail[1:]]
    assert len(freqs) == 16 and freqs == sorted(freqs, reverse=True)
    assert sorted(int(r[3]) for r in detail[1:]) == list(range(16))
    summary = read_csv(tmp_path / "o" / "neuron_summary.csv")
    assert float(summary[1][4]) == max(freqs)


def test_calibrate(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["calibrate", "--config", cfg, "--bins", "5", "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "calibration.csv")
    assert rows[0] == ["experiment", "bin_lo", "bin_hi", "count", "accuracy", "confidence"]
    assert len(rows) == 6
    assert sum(int(r[3]) for r in rows[1:]) == 20


def test_corrupt_eval(tmp_path, mnist_cfg):
    for d in ("a", "b"):
        assert main(["corrupt-eval", "--config", mnist_cfg, "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "corrupt_eval.csv").read_bytes()
    assert a == (tmp_path / "b" / "corrupt_eval.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "corrupt_eval.csv")
    assert rows[0] == ["experiment", "corruption", "severity", "layer", "metric", "value"]
    keys = {(r[1], r[2], r[4]) for r in rows[1:]}
    for kind in ("gaussian", "impulse", "shot"):
        for sev in range(6):
            for metric in ("eval_acc", "ece", "nonzero_fraction"):
                assert (kind, str(sev), metric) in keys


def test_corrupt_eval_needs_images(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["corrupt-eval", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG_MALFORMED


def test_plot_polyline_per_layer(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    svg = tmp_path / "p.svg"
    assert main(["plot", "--report", str(tmp_path / "o" / "report.csv"), "--metric", "nonzero_fraction",
                 "--logy", "--out", str(svg)]) == 0
    root = ET.parse(svg).getroot()
    assert root.tag == SVG_NS + "svg" and root.get("version") == "1.1"
    lines = root.findall(f"{SVG_NS}polyline")
    assert len(lines) == 2
    assert "log scale" in svg.read_text()
    assert main(["plot", "--report", str(tmp_path / "o" / "report.csv"), "--metric", "neuron_freq",
                 "--out", str(tmp_path)]) == EXIT_MISSING_FILE


def test_svg_geometry(tmp_path):
    rows = [{"experiment": "e", "step": s, "layer": 0, "metric": "m", "value": v}
            for s, v in ((0, 1.0), (10, 0.1), (20, 0.01))]
    series = collect_series(rows, "m")
    path = tmp_path / "g.svg"
    render_svg(series, path, "m", logy=True)
    pts = ET.parse(path).getroot().find(f"{SVG_NS}polyline").get("points").split()
    ys = [float(p.split(",")[1]) for p in pts]
    xs = [float(p.split(",")[0]) for p in pts]
    # equal ratios are equally spaced on a log axis
    assert ys[1] - ys[0] == pytest.approx(ys[2] - ys[1])
    assert xs[1] - xs[0] == pytest.approx(xs[2] - xs[1])
    render_svg(series, path, "m", logy=False)
    ys = [float(p.split(",")[1]) for p in ET.parse(path).getroot().find(f"{SVG_NS}polyline").get("points").split()]
    assert ys[2] - ys[1] < ys[1] - ys[0]
    with pytest.raises(ValueError):
        render_svg({("e", 0): [(0, 0.0), (1, -1.0)]}, path, "m", logy=True)


def test_png_rendering(tmp_path):
    pytest.importorskip("matplotlib")
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["train-mlp", "--config", cfg, "--out", str(tmp_path / "o"), "--png"]) == 0
    data = (tmp_path / "o" / "nonzero_fraction.png").read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert re.search(rb"IEND", data)
