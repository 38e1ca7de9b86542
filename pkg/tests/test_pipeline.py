import math
import os

import pytest
import torch

from abnet import config, pipeline
from abnet.checkpoint import load_checkpoint
from abnet.errors import ConfigurationError, DataError, StageError
from abnet.evaluation import RECORD_FIELDS


def test_pipeline_writes_artifacts(tiny_run):
    spec = config.build_spec(tiny_run)
    result = pipeline.run_pipeline(spec, console=False)
    out = spec.output_dir
    for name in ("vocab.src.txt", "vocab.tgt.txt", "hypotheses.txt", "report.tsv", "report.txt",
                 "metrics.finetune.tsv", "metrics.pretrain-source.tsv",
                 "metrics.pretrain-target.tsv", "logs/abnet.log"):
        assert os.path.exists(os.path.join(out, name)), name
    with open(os.path.join(out, "report.tsv")) as f:
        header, record = f.read().splitlines()
    assert header.split("\t") == list(RECORD_FIELDS)
    assert len(record.split("\t")) == len(RECORD_FIELDS)
    with open(os.path.join(out, "hypotheses.txt")) as f:
        assert len(f.read().splitlines()) == 5

    params, model_config = load_checkpoint(result.paths["model"])
    assert model_config == result.model_config
    for name, tensor in result.params.items():
        assert torch.equal(params[name], tensor)
    assert result.report.mode == "parallel"
    assert result.report.sentences == 5
    assert result.audit.trainable < result.audit.total


def test_frozen_backbones_match_pretrained_checkpoints(tiny_run):
    result = pipeline.run_pipeline(config.build_spec(tiny_run), console=False)
    for side in ("source", "target"):
        backbone, _ = load_checkpoint(result.paths[f"backbone_{side}"])
        for name, tensor in backbone.items():
            assert torch.equal(result.params[name], tensor), name


def test_autoregressive_and_scratch_runs(tiny_run):
    ar = pipeline.run_pipeline(
        config.build_spec(dict(tiny_run, decoder_kind="transformer-ar")), console=False
    )
    assert ar.report.mode == "ar"
    assert set(ar.backbones) == {"source"}

    scratch_values = dict(tiny_run, mode="train-scratch", output_dir=tiny_run["output_dir"] + "-s")
    scratch = pipeline.run_pipeline(config.build_spec(scratch_values), console=False)
    assert scratch.backbones == {}
    assert scratch.audit.frozen == 0


def test_vocabularies_follow_lowercase_key(tiny_run):
    train = [("Ba Be", "Be Ba"), ("Bi", "Bi")]
    cased = pipeline.build_vocabularies(train, config.build_spec(dict(tiny_run, lowercase=False)))
    assert all(not vocab.lowercase for vocab in cased)
    assert "B" in cased[0].token_to_id
    folded = pipeline.build_vocabularies(train, config.build_spec(tiny_run))
    assert "B" not in folded[0].token_to_id
    assert pipeline.backbone_key(dict(tiny_run, lowercase=False)) != pipeline.backbone_key(
        tiny_run
    )


def test_stage_failure_names_the_stage(tiny_run, tmp_path):
    data_dir = tmp_path / "broken"
    data_dir.mkdir()
    (data_dir / "train.tsv").write_text("no tab here\n")
    (data_dir / "valid.tsv").write_text("ba\tba\n")
    (data_dir / "test.tsv").write_text("be\tbe\n")
    spec = config.build_spec(dict(tiny_run, data_dir=str(data_dir)))
    with pytest.raises(StageError) as excinfo:
        pipeline.run_pipeline(spec, console=False)
    assert excinfo.value.stage == "data"
    assert isinstance(excinfo.value.cause, DataError)
    assert str(excinfo.value).startswith("data: ")


def test_variants_share_backbones_and_data(tiny_run, tmp_path):
    variants = [
        config.Variant("narrow", {"d_adapter": 4}),
        config.Variant("full", {"mode": "finetune-full"}),
        config.Variant("wide-model", {"d_ffn": 16}),
    ]
    results, table = pipeline.run_ablation(tiny_run, variants, str(tmp_path / "ablation"),
                                           console=False)
    narrow, full, wide = (r.result for r in results)
    assert narrow.backbones["source"] is full.backbones["source"]
    assert wide.backbones["source"] is not narrow.backbones["source"]
    assert full.audit.frozen == 0
    assert os.path.exists(tmp_path / "ablation" / "ablation.tsv")
    assert "narrow" in table
    base_data = config.build_spec(tiny_run).resolved_data_dir
    assert os.path.exists(os.path.join(base_data, "train.tsv"))
    assert not os.path.exists(tmp_path / "ablation" / "narrow" / "data")


def test_scratch_variant_ignores_shared_backbones(tiny_run, tmp_path):
    variants = [
        config.Variant("adapters", {"epochs": 0}),
        config.Variant("scratch", {"mode": "train-scratch", "epochs": 0}),
    ]
    adapters, scratch = (
        r.result for r in pipeline.run_variants(tiny_run, variants, str(tmp_path / "v"),
                                                console=False)
    )
    name = "encoder.layers.1.attn.q.weight"
    assert scratch.backbones == {}
    assert torch.equal(adapters.params[name], adapters.backbones["source"][name])
    assert not torch.equal(scratch.params[name], adapters.backbones["source"][name])
    assert not os.path.exists(tmp_path / "v" / "scratch" / "checkpoints" / "backbone-source.ckpt")


def test_sweep_rows(tiny_run, tmp_path):
    rows, table = pipeline.run_sweep(tiny_run, [4, 8], str(tmp_path / "sweep"), console=False)
    assert [row["d_adapter"] for row in rows] == [4, 8]
    assert rows[0]["encoder_trainable"] < rows[1]["encoder_trainable"]
    assert rows[0]["trainable_params"] < rows[1]["trainable_params"]
    with open(tmp_path / "sweep" / "sweep.tsv") as f:
        lines = f.read().splitlines()
    assert lines[0].split("\t") == [
        "d_adapter", "trainable_params", "encoder_trainable", "bleu", "exact_match"
    ]
    assert len(lines) == 3


def test_empty_sweep(tiny_run, tmp_path):
    with pytest.raises(ConfigurationError):
        pipeline.run_sweep(tiny_run, [], str(tmp_path))


@pytest.mark.slow
@pytest.mark.parametrize(
    "overrides",
    [
        {"decode_mode": "parallel"},
        {"decoder_kind": "transformer-ar", "decode_mode": "ar", "beam_width": 5},
    ],
)
def test_desk_reversal_is_learned(tmp_path, overrides):
    spec = config.build_spec(dict(overrides, output_dir=str(tmp_path / "desk")))
    result = pipeline.run_pipeline(spec, console=False)
    assert result.report.exact_match >= 0.95


@pytest.mark.slow
def test_training_modes_compared(tiny_run, tmp_path):
    base = dict(tiny_run, train_size=200, pretrain_epochs=5, epochs=10)
    variants = [
        config.Variant(mode, {"mode": mode})
        for mode in ("finetune-adapters", "finetune-full", "train-scratch")
    ]
    runs = pipeline.run_variants(base, variants, str(tmp_path), console=False)
    results = {r.name: r.result for r in runs}
    for result in results.values():
        assert len(result.summaries) == 10
        assert all(math.isfinite(s.mean_loss) for s in result.summaries)
    assert results["finetune-adapters"].final_loss < results["train-scratch"].final_loss


@pytest.mark.slow
def test_sweep_trainable_counts_grow_with_width(tiny_run, tmp_path):
    rows, _ = pipeline.run_sweep(tiny_run, [8, 16, 32, 64], str(tmp_path / "sweep"),
                                 console=False)
    trainable = [row["trainable_params"] for row in rows]
    encoder = [row["encoder_trainable"] for row in rows]
    assert trainable == sorted(set(trainable))
    assert encoder == sorted(set(encoder))


@pytest.mark.slow
def test_pipeline_runs_are_reproducible(tiny_run):
    first = pipeline.run_pipeline(config.build_spec(tiny_run), console=False)
    second_values = dict(tiny_run, output_dir=tiny_run["output_dir"] + "-again")
    second = pipeline.run_pipeline(config.build_spec(second_values), console=False)
    assert list(first.params) == list(second.params)
    for name, tensor in first.params.items():
        assert torch.equal(second.params[name], tensor), name
    assert [s.mean_loss for s in first.summaries] == [s.mean_loss for s in second.summaries]
    assert first.report.bleu == second.report.bleu
    with open(first.paths["hypotheses"]) as a, open(second.paths["hypotheses"]) as b:
        assert a.read() == b.read()
