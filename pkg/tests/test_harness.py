import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from pct.cli import main as cli_main
from pct.errors import ConfigError, NumericError
from pct.harness import (
    RunConfig,
    RunReport,
    Trainer,
    evaluate_checkpoint,
    evaluate_model,
    export_attention,
    linear_probe_accuracy,
    parse_kv_config,
    run_ablation,
    stage_group_probe,
    train_model,
    variant_config,
)
from pct.synthdata import DatasetSpec, generate, write_dataset
from pct.tensor import Tensor

TINY_RUN = dict(
    input_h=8,
    input_w=8,
    stem_width=4,
    stem_stride=2,
    stage_widths=(4, 8),
    stage_strides=(1, 2),
    ct_enabled=(True, True),
    heads=2,
    max_rel_offset=3,
    embed_dim=8,
    epochs=2,
    batch_size=16,
    decay_epochs=(1,),
)

TINY_SPEC = dict(
    num_groups=3,
    ids_per_group=6,
    images_per_id=4,
    height=8,
    width=8,
    test_ids_per_group=2,
    pairs_per_group=8,
    texture_gains=(1.0, 1.5, 2.0),
    noise_sigmas=(0.4, 0.2, 0.2),
)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate(DatasetSpec(**TINY_SPEC), seed=11)


class TestConfigParsing:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "epochs=5\n"
            "lr_face = 0.002\n"
            "stage_widths=4,8\n"
            "stage_strides=1,2\n"
            "ct_enabled=true,false\n"
            "margin_variant=cos\n"
            "\n"
        )
        cfg = parse_kv_config(path, RunConfig)
        assert cfg.epochs == 5
        assert cfg.lr_face == 0.002
        assert cfg.stage_widths == (4, 8)
        assert cfg.ct_enabled == (True, False)
        assert cfg.margin_variant == "cos"

    def test_unknown_key_names_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs=5\nnot_a_key=1\n")
        with pytest.raises(ConfigError) as exc:
            parse_kv_config(path, RunConfig)
        assert ":2:" in str(exc.value)

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "spec.cfg"
        path.write_text("num_groups=4\njust some words\n")
        with pytest.raises(ConfigError) as exc:
            parse_kv_config(path, DatasetSpec)
        assert ":2:" in str(exc.value)

    def test_dataset_spec_file_roundtrip(self, tmp_path):
        # the spec.cfg written next to a dataset parses back, seed line included
        ds = generate(DatasetSpec(**TINY_SPEC), seed=3)
        write_dataset(ds, tmp_path / "d")
        spec = parse_kv_config(tmp_path / "d" / "spec.cfg", DatasetSpec)
        assert spec == ds.spec


class TestVariants:
    def test_pct_and_noct(self):
        base = RunConfig(**TINY_RUN)
        assert variant_config(base, "pct").ct_enabled == (True, True)
        assert variant_config(base, "no-ct").ct_enabled == (False, False)

    def test_single_stage(self):
        base = RunConfig(**TINY_RUN)
        assert variant_config(base, "stage2").ct_enabled == (False, True)

    def test_heads(self):
        base = RunConfig(**TINY_RUN)
        cfg = variant_config(base, "h4")
        assert cfg.heads == 4 and all(cfg.ct_enabled)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            variant_config(RunConfig(**TINY_RUN), "bogus")


class TestTraining:
    def test_smoke_run(self, tiny_dataset, tmp_path):
        cfg = RunConfig(**TINY_RUN, seed=0)
        report, ckpt = train_model(cfg, tiny_dataset, tmp_path / "run")
        assert ckpt.exists()
        assert len(report.epoch_losses["total"]) == cfg.epochs
        assert all(np.isfinite(v) for v in report.epoch_losses["total"])
        assert report.metrics["ave"] > 0.0
        assert (tmp_path / "run" / "metrics.json").exists()
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "metrics_roc.png").exists()
        assert (tmp_path / "run" / "training_curve.png").exists()
        # report round-trips through JSON
        loaded = RunReport.from_dict(json.loads((tmp_path / "run" / "run_report.json").read_text()))
        assert loaded.metrics == report.metrics

    def test_determinism_byte_identical(self, tiny_dataset, tmp_path):
        digests = []
        for name in ("a", "b"):
            cfg = RunConfig(**TINY_RUN, seed=7)
            train_model(cfg, tiny_dataset, tmp_path / name)
            digests.append(
                tuple(
                    hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest()
                    for f in ("checkpoint.pct", "metrics.json", "metrics.csv")
                )
            )
        assert digests[0] == digests[1]

    def test_checkpoint_eval_matches_report(self, tiny_dataset, tmp_path):
        cfg = RunConfig(**TINY_RUN, seed=1)
        report, ckpt = train_model(cfg, tiny_dataset, tmp_path / "run")
        metrics = evaluate_checkpoint(ckpt, tiny_dataset, tmp_path / "again", cfg.fpr_grid)
        assert metrics.to_dict() == report.metrics

    def test_alpha_zero_race_heads_untouched(self, tiny_dataset, tmp_path):
        # with alpha = 0 and no weight decay, parameters that only the group
        # loss reaches must keep their initial bytes
        cfg = RunConfig(**TINY_RUN, seed=2, alpha=0.0, weight_decay=0.0)
        images, ids, groups = tiny_dataset.images("train")
        classes, cidx = np.unique(ids, return_inverse=True)
        trainer = Trainer(cfg, classes.size, tiny_dataset.spec.num_groups)
        before = {
            "race.w": trainer.race_head.weight.value.data.tobytes(),
            "race.b": trainer.race_head.bias.value.data.tobytes(),
            "head.ra.w": trainer.model.params["head.ra.w"].value.data.tobytes(),
            "stem.ra.w": trainer.model.params["stem.ra.w"].value.data.tobytes(),
        }
        for step in range(3):
            trainer.step(Tensor(images[:16]), cidx[:16], groups[:16], 0, step)
        assert trainer.race_head.weight.value.data.tobytes() == before["race.w"]
        assert trainer.race_head.bias.value.data.tobytes() == before["race.b"]
        assert trainer.model.params["head.ra.w"].value.data.tobytes() == before["head.ra.w"]
        # the group branch itself is still coupled through the CT keys
        assert trainer.model.params["stem.ra.w"].value.data.tobytes() != before["stem.ra.w"]

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_nan_abort_carries_diagnostics(self, tiny_dataset, tmp_path):
        cfg = RunConfig(**{**TINY_RUN, "epochs": 4}, seed=3, lr_face=50.0, lr_race=5.0)
        with pytest.raises(NumericError) as exc:
            train_model(cfg, tiny_dataset, tmp_path / "diverge")
        message = str(exc.value)
        assert "epoch" in message and "step" in message and "lr_face" in message

    def test_random_init_near_chance_on_noise_dominated_data(self):
        # enough pairs that the on-set threshold sweep cannot manufacture
        # accuracy out of noise
        spec = DatasetSpec(
            num_groups=3, ids_per_group=14, images_per_id=8, height=8, width=8,
            test_ids_per_group=7, pairs_per_group=150,
            texture_gains=0.0, noise_sigmas=8.0,
        )
        noisy = generate(spec, seed=21)
        cfg = RunConfig(**TINY_RUN, seed=4)
        trainer = Trainer(cfg, 21, spec.num_groups)
        metrics = evaluate_model(trainer.model, noisy, fpr_grid=(0.5,))
        for acc in metrics.accuracy.values():
            assert 0.4 <= acc <= 0.6


class TestProbe:
    def test_linear_probe_separable(self, rng):
        x = np.concatenate([rng.normal(0, 0.1, (30, 4)), rng.normal(3, 0.1, (30, 4))])
        y = np.array([0] * 30 + [1] * 30)
        order = rng.permutation(60)
        assert linear_probe_accuracy(x[order], y[order]) == 1.0

    def test_stage_probe_shape(self, tiny_dataset):
        cfg = RunConfig(**TINY_RUN, seed=5)
        trainer = Trainer(cfg, 12, tiny_dataset.spec.num_groups)
        x, _, groups = tiny_dataset.images("test")
        probes = stage_group_probe(trainer.model, x, groups)
        assert len(probes) == 2
        assert all(0.0 <= p <= 1.0 for p in probes)


class TestAblation:
    def test_single_variant_degenerates_to_train_eval(self, tiny_dataset, tmp_path):
        base = RunConfig(**TINY_RUN)
        table = run_ablation(base, tiny_dataset, tmp_path / "abl", variants=("pct",), seeds=(0,),
                             probe_stages=False)
        assert len(table["rows"]) == 1
        row = table["rows"][0]
        cfg = variant_config(base, "pct")
        cfg.seed = 0
        direct, _ = train_model(cfg, tiny_dataset, tmp_path / "direct")
        assert row["ave"] == direct.metrics["ave"]
        assert row["std"] == direct.metrics["std"]

    def test_table_shape(self, tiny_dataset, tmp_path):
        table = run_ablation(
            RunConfig(**TINY_RUN), tiny_dataset, tmp_path / "abl2",
            variants=("no-ct", "pct"), seeds=(0, 1), probe_stages=False,
        )
        assert len(table["rows"]) == 4
        assert len(table["aggregates"]) == 2
        assert (tmp_path / "abl2" / "ablation.json").exists()
        assert (tmp_path / "abl2" / "ablation.csv").exists()
        assert (tmp_path / "abl2" / "ablation_std.png").exists()
        for agg in table["aggregates"]:
            assert len(agg["per_seed_std"]) == 2


class TestExportAttention:
    def test_files_written(self, tiny_dataset, tmp_path):
        cfg = RunConfig(**TINY_RUN, seed=6)
        _, ckpt = train_model(cfg, tiny_dataset, tmp_path / "run")
        maps = export_attention(ckpt, tiny_dataset, tmp_path / "attn")
        assert len(maps) == 2
        for t, arr in maps:
            assert arr.shape[0] == cfg.heads
            assert (tmp_path / "attn" / f"attn_stage{t}.pct").exists()
            assert (tmp_path / "attn" / f"heatmap_stage{t}.pct").exists()
            for head in range(cfg.heads):
                pgm = tmp_path / "attn" / f"heatmap_stage{t}_head{head}.pgm"
                assert pgm.read_bytes().startswith(b"P5\n")
        assert (tmp_path / "attn" / "attention.png").exists()


def write_tiny_configs(tmp_path):
    spec_lines = [f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}"
                  for k, v in TINY_SPEC.items()]
    (tmp_path / "spec.cfg").write_text("\n".join(spec_lines) + "\n")
    run_lines = [f"{k}={','.join(str(x).lower() for x in v) if isinstance(v, tuple) else v}"
                 for k, v in TINY_RUN.items()]
    (tmp_path / "run.cfg").write_text("\n".join(run_lines) + "\n")


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        write_tiny_configs(tmp_path)
        data = str(tmp_path / "data")
        assert cli_main(["generate", "--config", str(tmp_path / "spec.cfg"),
                         "--out", data, "--seed", "11"]) == 0
        assert cli_main(["train", "--config", str(tmp_path / "run.cfg"),
                         "--data", data, "--out", str(tmp_path / "run"), "--seed", "0"]) == 0
        ckpt = str(tmp_path / "run" / "checkpoint.pct")
        assert cli_main(["eval", ckpt, "--data", data, "--out", str(tmp_path / "eval"),
                         "--fpr-grid", "0.5,0.1"]) == 0
        metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        # 24 pooled impostors: 0.5 stays, 0.1 is truncated (< 10 events)
        assert [e["target_fpr"] for e in metrics["fpr_protocol"]] == [0.5]
        assert cli_main(["export-attn", ckpt, "--data", data,
                         "--out", str(tmp_path / "attn")]) == 0
        assert cli_main(["ablate", "--config", str(tmp_path / "run.cfg"), "--data", data,
                         "--out", str(tmp_path / "abl"), "--seed", "0", "--seeds", "1",
                         "--variants", "no-ct"]) == 0
        capsys.readouterr()

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["train", "--data", "somewhere"])  # missing --out
        assert exc.value.code == 1

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        code = cli_main(["train", "--data", str(tmp_path / "missing"),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        assert "pct train" in capsys.readouterr().err

    def test_eval_thread_cap_consistent(self, tiny_dataset, tmp_path, monkeypatch):
        cfg = RunConfig(**TINY_RUN, seed=8)
        report, ckpt = train_model(cfg, tiny_dataset, tmp_path / "run")
        monkeypatch.setenv("PCT_THREADS", "1")
        single = evaluate_checkpoint(ckpt, tiny_dataset, tmp_path / "single", cfg.fpr_grid)
        assert single.to_dict() == report.metrics
