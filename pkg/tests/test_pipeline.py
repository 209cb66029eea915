import os
import subprocess
import sys

import numpy as np
import pytest

from posenas.arch import ArchitectureDescriptor, HeadConfig, LayerChoice, StemSpec, assemble_network, save_arch
from posenas.cost import flops_of
from posenas.data import make_arrays, save_dataset, synth_dataset
from posenas.fileio import FormatError
from posenas.nn import ConvSpec
from posenas.pipeline import (
    PipelineConfig,
    ablate_sic,
    checkerboard_score,
    evaluate,
    load_model_into,
    parse_config,
    run_pipeline,
    save_model,
    train_derived,
)
from helpers import naive_transposed2d


def _micro_desc(sic=True, size=32, k=4):
    return ArchitectureDescriptor(
        input_h=size, input_w=size, input_ch=1,
        stem=StemSpec(4, 4),
        layers=(
            LayerChoice.mbconv(0, 0, 3, 3, 4, 2),
            LayerChoice.mbconv(1, 1, 3, 3, 6, 2),
            LayerChoice.mbconv(2, 2, 3, 3, 6, 2),
            LayerChoice.mbconv(3, 3, 3, 6, 8, 1),
        ),
        head=HeadConfig(w1=8, w2=8, sic=sic, keypoints=k),
    )


# ---------------------------------------------------------------------------
# checkerboard score


def test_checkerboard_constant_zero():
    assert checkerboard_score(np.full((10, 10), 7.0)) == 0.0


def test_checkerboard_strict_period2_is_one():
    m = np.zeros((8, 8))
    m[::2, ::2] = 1.0
    m[1::2, 1::2] = 1.0
    assert checkerboard_score(m) == pytest.approx(1.0, abs=1e-6)


def test_checkerboard_k3_high_k4_low():
    x = np.ones((1, 1, 16, 16))
    k3 = naive_transposed2d(x, np.ones((1, 1, 3, 3)), stride=2, padding=0)[0, 0]
    k4 = naive_transposed2d(x, np.ones((1, 1, 4, 4)), stride=2, padding=1)[0, 0]
    assert checkerboard_score(k3[:32, :32]) > 0.5
    assert checkerboard_score(k4) < 0.05


def test_checkerboard_channel_mean_of_3d():
    m = np.zeros((3, 8, 8))
    m[:, ::2, ::2] = 1.0
    m[:, 1::2, 1::2] = 1.0
    assert checkerboard_score(m) == pytest.approx(1.0, abs=1e-6)


def test_checkerboard_rejects_small_or_odd_maps():
    with pytest.raises(ValueError):
        checkerboard_score(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        checkerboard_score(np.zeros((7, 8)))


# ---------------------------------------------------------------------------
# model weights file


def test_model_round_trip_byte_exact(tmp_path):
    net = assemble_network(_micro_desc(), seed=0)
    path = tmp_path / "model.bin"
    save_model(net, path)
    clone = assemble_network(_micro_desc(), seed=99)
    load_model_into(clone, path)
    for (_, a), (_, b) in zip(net.named_params(), clone.named_params()):
        assert a.data.tobytes() == b.data.tobytes()
    path2 = tmp_path / "model2.bin"
    save_model(clone, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_model_file_rejects_corruption(tmp_path):
    net = assemble_network(_micro_desc(), seed=0)
    path = tmp_path / "model.bin"
    save_model(net, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "bad1.bin"
    bad_magic.write_bytes(b"XX" + raw[2:])
    with pytest.raises(FormatError, match="magic"):
        load_model_into(assemble_network(_micro_desc(), seed=1), bad_magic)

    truncated = tmp_path / "bad2.bin"
    truncated.write_bytes(bytes(raw[:-9]))
    with pytest.raises(FormatError, match="truncated|trailing"):
        load_model_into(assemble_network(_micro_desc(), seed=1), truncated)

    trailing = tmp_path / "bad3.bin"
    trailing.write_bytes(bytes(raw) + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_model_into(assemble_network(_micro_desc(), seed=1), trailing)


def test_model_file_network_mismatch(tmp_path):
    net = assemble_network(_micro_desc(), seed=0)
    path = tmp_path / "model.bin"
    save_model(net, path)
    other = assemble_network(_micro_desc(sic=False), seed=0)
    with pytest.raises(FormatError, match="does not match"):
        load_model_into(other, path)


# ---------------------------------------------------------------------------
# config files


def test_parse_config_sections_and_comments(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(
        """
        # top comment
        [data]
        n = 12
        size = 32
        keypoints = 4
        seed = 1

        [search]
        seed = 2
        warmup_epochs = 1
        """
    )
    values = parse_config(path)
    assert values["data.n"] == "12"
    assert values["search.warmup_epochs"] == "1"


def test_parse_config_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[data]\nnonsense line\n")
    with pytest.raises(FormatError) as exc:
        parse_config(path)
    assert ":2" in str(exc.value)


def test_pipeline_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        """
        [data]
        n = 20
        size = 32
        keypoints = 4
        seed = 3

        [supernet]
        stem_width = 4
        stem_sep_width = 4
        stages = 4:2:1, 6:2:1, 6:2:1, 8:1:1
        input_size = 32
        kernels = 3
        expansions = 3,6

        [head]
        w1 = 8
        w2 = 8

        [search]
        warmup_epochs = 1
        joint_epochs = 1
        seed = 4

        [train]
        epochs = 2
        seed = 5
        """
    )
    cfg = PipelineConfig.from_file(path)
    assert cfg.data_n == 20
    assert cfg.supernet.input_size == 32
    assert cfg.supernet.stages[0].width == 4
    assert cfg.head.keypoints == 4  # defaults to data keypoints
    assert cfg.schedule.warmup_epochs == 1
    assert cfg.train_epochs == 2


def test_pipeline_config_flag_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[data]\nn = 20\nsize = 32\nkeypoints = 4\n")
    cfg = PipelineConfig.from_file(path, overrides={"data.n": 7})
    assert cfg.data_n == 7


def test_pipeline_config_rejects_missing_data_dir(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[data]\ndir = nowhere\n")
    with pytest.raises(FileNotFoundError):
        PipelineConfig.from_file(path)


def test_pipeline_config_keypoint_mismatch(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[data]\nkeypoints = 4\n[head]\nkeypoints = 6\n")
    with pytest.raises(ValueError, match="keypoints"):
        PipelineConfig.from_file(path)


# ---------------------------------------------------------------------------
# training wrappers


def test_train_derived_loss_decreases_and_evaluate_runs():
    samples = synth_dataset(30, 32, 4, seed=21)
    heldout = synth_dataset(10, 32, 4, seed=22)
    net = assemble_network(_micro_desc(), seed=2)
    net, trace = train_derived(net, (samples, heldout), epochs=6, seed=3, sigma=1.5)
    assert trace[-1]["train_loss"] < trace[0]["train_loss"]
    assert "val_pck" in trace[-1]
    trained_pck, preds = evaluate(net, heldout, 0.5)
    assert len(preds) == len(heldout)
    assert 0.0 <= trained_pck <= 1.0


def test_ablate_sic_structure():
    samples = synth_dataset(24, 32, 4, seed=31)
    report = ablate_sic(samples, _micro_desc(), epochs=1, seeds=(0, 1), sigma=1.5)
    assert report.on.sic and not report.off.sic
    assert len(report.on.pcks) == 2 and len(report.off.pcks) == 2
    # FLOPs difference is exactly the SIC depthwise convolution (8 x 8 maps)
    head_map = 32 // 4
    sic_spec = ConvSpec("depthwise", 3, 1, 8, 8)
    assert report.on.flops - report.off.flops == flops_of(sic_spec, (8, head_map, head_map))
    text = report.table_text()
    assert "on" in text and "off" in text and len(text.splitlines()) == 3


def test_ablate_sic_needs_two_seeds():
    with pytest.raises(ValueError):
        ablate_sic(synth_dataset(8, 32, 4, seed=1), _micro_desc(), 1, seeds=(0,))


# ---------------------------------------------------------------------------
# end-to-end smoke and CLI


def _micro_cfg(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(
        """
        [data]
        n = 24
        size = 32
        keypoints = 4
        seed = 3
        eval_n = 8
        eval_seed = 77

        [supernet]
        input_size = 32
        stem_width = 4
        stem_sep_width = 4
        stages = 4:2:1, 6:2:1, 6:2:1, 8:1:1
        kernels = 3
        expansions = 3,6

        [head]
        w1 = 8
        w2 = 8

        [search]
        warmup_epochs = 1
        joint_epochs = 2
        batch_size = 8
        seed = 4

        [train]
        epochs = 3
        seed = 5

        [pipeline]
        out_dir = out
        """
    )
    return path


def test_run_pipeline_microscale_writes_artifacts(tmp_path):
    cfg = PipelineConfig.from_file(_micro_cfg(tmp_path))
    metrics = run_pipeline(cfg)
    for name in ("costtable.txt", "search_state.txt", "trace.txt", "arch.txt", "model.bin", "metrics.txt"):
        assert os.path.isfile(os.path.join(cfg.out_dir, name)), name
    assert 0.0 <= metrics["searched_pck"] <= 1.0
    assert metrics["searched_flops"] > 0
    # the run is reproducible end to end
    metrics2 = run_pipeline(cfg, write_artifacts=False)
    assert metrics2["searched_pck"] == pytest.approx(metrics["searched_pck"], abs=1e-4)


def _run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "posenas.cli", *args],
        capture_output=True, text=True, cwd=cwd,
    )


def test_cli_gen_data_flops_train_eval(tmp_path):
    r = _run_cli(
        ["gen-data", "--n", "12", "--size", "32", "--keypoints", "4", "--seed", "1",
         "--out", str(tmp_path / "ds")],
        tmp_path,
    )
    assert r.returncode == 0, r.stderr
    assert os.path.isfile(tmp_path / "ds" / "annotations.jsonl")

    arch_path = tmp_path / "arch.txt"
    save_arch(_micro_desc(), arch_path)
    r = _run_cli(["flops", "--arch", str(arch_path)], tmp_path)
    assert r.returncode == 0, r.stderr
    assert "total" in r.stdout and "MFLOPs" in r.stdout

    r = _run_cli(
        ["train", "--arch", str(arch_path), "--data", str(tmp_path / "ds"),
         "--epochs", "1", "--seed", "0", "--out", str(tmp_path / "model.bin")],
        tmp_path,
    )
    assert r.returncode == 0, r.stderr
    assert os.path.isfile(tmp_path / "model.bin")

    r = _run_cli(
        ["eval", "--model", str(tmp_path / "model.bin"), "--arch", str(arch_path),
         "--data", str(tmp_path / "ds"), "--pck-alpha", "0.5"],
        tmp_path,
    )
    assert r.returncode == 0, r.stderr
    assert "PCK@0.5" in r.stdout


def test_cli_bench_and_derive(tmp_path):
    cfg = _micro_cfg(tmp_path)
    table_path = tmp_path / "table.txt"
    r = _run_cli(["bench", "--config", str(cfg), "--benchmark", "flops", "--out", str(table_path)], tmp_path)
    assert r.returncode == 0, r.stderr
    assert table_path.is_file()

    arch_path = tmp_path / "searched.txt"
    state_path = tmp_path / "state.txt"
    r = _run_cli(
        ["search", "--config", str(cfg), "--cost-table", str(table_path),
         "--out", str(arch_path), "--state-out", str(state_path)],
        tmp_path,
    )
    assert r.returncode == 0, r.stderr
    assert arch_path.is_file() and state_path.is_file()

    rederived = tmp_path / "rederived.txt"
    r = _run_cli(
        ["derive", "--search-state", str(state_path), "--cost-table", str(table_path),
         "--out", str(rederived)],
        tmp_path,
    )
    assert r.returncode == 0, r.stderr
    assert rederived.read_text() == arch_path.read_text()
