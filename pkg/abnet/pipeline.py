"""
End-to-end experiment runs for abnet.

run_pipeline chains the stages of one experiment:

    data -> vocab -> pretrain-source -> pretrain-target -> assemble
         -> finetune -> decode -> evaluate

Each stage failure is re-raised as StageError naming the stage. run_sweep
and run_ablation run several variants of a base configuration, reusing the
pre-trained backbones whenever a variant leaves every backbone-affecting
key alone.
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from tabulate import tabulate

from abnet import config as abconfig
from abnet.checkpoint import save_checkpoint
from abnet.data import SPLITS, gen_synthetic, read_pairs, split_path
from abnet.decoding import DecodeConfig, ForwardCounter, decode, resolve_mode
from abnet.errors import ConfigurationError, StageError
from abnet.evaluation import (
    EvalReport,
    ParameterAudit,
    build_report,
    measure_latency,
    parameter_audit,
)
from abnet.logger import setup_logger
from abnet.model import ModelConfig, ParameterStore, assemble_abnet
from abnet.tokenizer import Vocabulary, build_vocab, decode as detokenize, encode, save_vocab
from abnet.training import (
    EpochSummary,
    MetricsLog,
    TrainConfig,
    Trainer,
    apply_partition,
    pretrain_backbone,
)
from abnet.utils import seed_everything

logger = logging.getLogger(__name__)

BACKBONE_KEYS = (
    abconfig.DATA_KEYS
    | set(abconfig.PRETRAIN_KEYS)
    | {
        "seed", "src_vocab_size", "tgt_vocab_size", "lowercase", "data_dir",
        "d_hidden", "n_heads", "encoder_layers", "decoder_layers", "d_ffn",
        "max_source_length", "max_target_length", "dropout", "dtype",
    }
)

IdPair = Tuple[List[int], List[int]]


@dataclass
class PipelineResult:
    report: EvalReport
    audit: ParameterAudit
    model_config: ModelConfig
    params: ParameterStore
    backbones: Dict[str, ParameterStore]
    summaries: List[EpochSummary]
    paths: Dict[str, str] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.summaries[-1].mean_loss if self.summaries else float("nan")


@contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as StageError(name, cause)."""
    logger.info(f"Stage {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def load_splits(spec: abconfig.ExperimentSpec) -> Dict[str, List[Tuple[str, str]]]:
    """Read the dataset of `spec`, generating it first if any split is missing."""
    data_dir = spec.resolved_data_dir
    if not all(os.path.exists(split_path(data_dir, s)) for s in SPLITS):
        gen_synthetic(spec.data, data_dir, spec.max_target_symbols())
    return {s: read_pairs(split_path(data_dir, s)) for s in SPLITS}


def encode_pairs(
    pairs: Sequence[Tuple[str, str]], src_vocab: Vocabulary, tgt_vocab: Vocabulary
) -> List[IdPair]:
    return [(encode(s, src_vocab), encode(t, tgt_vocab)) for s, t in pairs]


def build_vocabularies(
    train: Sequence[Tuple[str, str]], spec: abconfig.ExperimentSpec
) -> Tuple[Vocabulary, Vocabulary]:
    src_vocab = build_vocab([s for s, _ in train], spec.src_vocab_size, spec.lowercase)
    tgt_vocab = build_vocab([t for _, t in train], spec.tgt_vocab_size, spec.lowercase)
    return src_vocab, tgt_vocab


def finetune_model(
    params: ParameterStore,
    model_config: ModelConfig,
    train_config: TrainConfig,
    tgt_vocab: Vocabulary,
    train: Sequence[IdPair],
    valid: Optional[Sequence[IdPair]] = None,
    metrics_path: Optional[str] = None,
) -> List[EpochSummary]:
    """Label the partition for the training mode and run the fine-tuning epochs."""
    apply_partition(params, train_config.mode)
    metrics = MetricsLog(metrics_path) if metrics_path else None
    try:
        trainer = Trainer(params, model_config, train_config, tgt_vocab, metrics=metrics)
        return trainer.fit(train, valid)
    finally:
        if metrics is not None:
            metrics.close()


def evaluate_model(
    params: ParameterStore,
    model_config: ModelConfig,
    decode_config: DecodeConfig,
    test: Sequence[IdPair],
) -> Tuple[EvalReport, ParameterAudit, List[List[int]]]:
    """Decode every test source at batch size 1 and score against the references."""
    counter = ForwardCounter()
    mode = resolve_mode(model_config, decode_config)

    def run(source):
        return decode(source, params, model_config, decode_config, counter)

    latency, results = measure_latency(run, [s for s, _ in test], counter)
    hypotheses = [r.tokens for r in results]
    audit = parameter_audit(params)
    report = build_report(hypotheses, [t for _, t in test], latency, audit, mode)
    return report, audit, hypotheses


def run_pipeline(
    spec: abconfig.ExperimentSpec,
    backbones: Optional[Mapping[str, ParameterStore]] = None,
    console: bool = True,
    log_level="INFO",
) -> PipelineResult:
    """
    Run one experiment end to end and write its artifacts under
    spec.output_dir.

    Args:
        spec: The experiment.
        backbones: Pre-trained stores by side ("source", "target") to reuse
            instead of pre-training.
        console: Also log to the console.
        log_level: Logging level for the run.

    Returns:
        PipelineResult with the report and the trained parameters.
    """
    out = spec.output_dir
    os.makedirs(out, exist_ok=True)
    setup_logger("abnet", os.path.join(out, "logs"), "abnet.log", log_level, console)
    seed_everything(spec.seed)
    # train-scratch never sees pre-trained weights, cached or not
    scratch = spec.finetune.mode == "train-scratch"
    backbones = {} if scratch else dict(backbones or {})
    paths: Dict[str, str] = {}

    with stage("data"):
        splits = load_splits(spec)

    with stage("vocab"):
        src_vocab, tgt_vocab = build_vocabularies(splits["train"], spec)
        paths["src_vocab"] = os.path.join(out, "vocab.src.txt")
        paths["tgt_vocab"] = os.path.join(out, "vocab.tgt.txt")
        save_vocab(src_vocab, paths["src_vocab"])
        save_vocab(tgt_vocab, paths["tgt_vocab"])
        model_config = replace(
            spec.model, src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab)
        )

    sides = []
    if not scratch:
        sides.append(("source", src_vocab, 0))
        if model_config.decoder_kind == "adapter-bert":
            sides.append(("target", tgt_vocab, 1))
    for side, vocab, column in sides:
        with stage(f"pretrain-{side}"):
            if side not in backbones:
                metrics_path = os.path.join(out, f"metrics.pretrain-{side}.tsv")
                with MetricsLog(metrics_path) as metrics:
                    backbones[side] = pretrain_backbone(
                        [pair[column] for pair in splits["train"]],
                        vocab,
                        model_config,
                        spec.pretrain,
                        side,
                        valid=[pair[column] for pair in splits["valid"]],
                        metrics=metrics,
                    )
                paths[f"metrics_pretrain_{side}"] = metrics_path
            else:
                logger.info(f"Reusing pre-trained {side} backbone")
            paths[f"backbone_{side}"] = os.path.join(out, "checkpoints", f"backbone-{side}.ckpt")
            save_checkpoint(backbones[side], model_config, paths[f"backbone_{side}"])

    with stage("assemble"):
        params = assemble_abnet(model_config, backbones.get("source"), backbones.get("target"))

    with stage("finetune"):
        train = encode_pairs(splits["train"], src_vocab, tgt_vocab)
        valid = encode_pairs(splits["valid"], src_vocab, tgt_vocab)
        paths["metrics_finetune"] = os.path.join(out, "metrics.finetune.tsv")
        summaries = finetune_model(
            params, model_config, spec.finetune, tgt_vocab, train, valid,
            paths["metrics_finetune"],
        )
        paths["model"] = os.path.join(out, "checkpoints", "abnet.ckpt")
        save_checkpoint(params, model_config, paths["model"])

    with stage("decode"):
        test = encode_pairs(splits["test"], src_vocab, tgt_vocab)
        report, audit, hypotheses = evaluate_model(params, model_config, spec.decode, test)
        paths["hypotheses"] = os.path.join(out, "hypotheses.txt")
        with open(paths["hypotheses"], "w", encoding="utf-8") as f:
            for tokens in hypotheses:
                f.write(detokenize(tokens, tgt_vocab) + "\n")

    with stage("evaluate"):
        paths["report"] = os.path.join(out, "report.tsv")
        with open(paths["report"], "w", encoding="utf-8") as f:
            f.write(EvalReport.record_header() + "\n" + report.to_record() + "\n")
        with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.render() + "\n")
        logger.info(
            f"BLEU {report.bleu:.2f}, exact match {report.exact_match:.4f}, "
            f"{report.latency_ms:.2f} ms/sentence, "
            f"{report.forward_calls_per_sentence:.2f} decoder forwards/sentence"
        )

    return PipelineResult(report, audit, model_config, params, backbones, summaries, paths)


def backbone_key(values: Mapping[str, Any]) -> Tuple:
    return tuple(sorted((k, repr(v)) for k, v in values.items() if k in BACKBONE_KEYS))


@dataclass
class VariantResult:
    name: str
    overrides: Dict[str, Any]
    result: PipelineResult

    def row(self) -> Dict[str, Any]:
        report = self.result.report
        return {
            "variant": self.name,
            "mode": report.mode,
            "final_loss": round(self.result.final_loss, 4),
            "bleu": round(report.bleu, 2),
            "exact_match": round(report.exact_match, 4),
            "trainable_params": self.result.audit.trainable,
            "encoder_trainable": self.result.audit.encoder_trainable,
            "forwards_per_sentence": round(report.forward_calls_per_sentence, 2),
        }


def run_variants(
    base: Mapping[str, Any],
    variants: Sequence[abconfig.Variant],
    output_dir: str,
    console: bool = True,
) -> List[VariantResult]:
    """
    Run each variant's overrides on top of `base` under output_dir/<name>.

    Variants that agree on every backbone-affecting key share one pair of
    pre-trained backbones; the dataset is shared unless a variant changes
    a data key.
    """
    base = dict(base)
    base_spec = abconfig.build_spec(base)
    shared_data_dir = base_spec.resolved_data_dir
    cache: Dict[Tuple, Dict[str, ParameterStore]] = {}
    results = []
    for variant in variants:
        values = dict(base)
        values.update(variant.overrides)
        values["output_dir"] = os.path.join(output_dir, variant.name)
        if not abconfig.DATA_KEYS & set(variant.overrides) and "data_dir" not in variant.overrides:
            values["data_dir"] = shared_data_dir
        spec = abconfig.build_spec(values)
        key = backbone_key(values)
        cached = cache.setdefault(key, {})
        result = run_pipeline(spec, backbones=cached, console=console)
        cached.update(result.backbones)
        results.append(VariantResult(variant.name, dict(variant.overrides), result))
    return results


def write_table(rows: Sequence[Dict[str, Any]], path: str) -> str:
    """Write rows as TSV to `path` and return a tabulate rendering."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    headers = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(headers) + "\n")
        for row in rows:
            f.write("\t".join(str(row[h]) for h in headers) + "\n")
    return tabulate([[row[h] for h in headers] for row in rows], headers=headers)


def run_ablation(
    base: Mapping[str, Any],
    variants: Sequence[abconfig.Variant],
    output_dir: str,
    console: bool = True,
) -> Tuple[List[VariantResult], str]:
    """Run a suite of variants and write ablation.tsv; returns results and the table text."""
    results = run_variants(base, variants, output_dir, console)
    table = write_table([r.row() for r in results], os.path.join(output_dir, "ablation.tsv"))
    return results, table


def run_sweep(
    base: Mapping[str, Any],
    sizes: Sequence[int],
    output_dir: str,
    console: bool = True,
) -> Tuple[List[Dict[str, Any]], str]:
    """
    Vary the encoder-adapter bottleneck width over `sizes`.

    Returns the (d_adapter, trainable, encoder-side trainable, BLEU, exact
    match) rows and their rendered table; sweep.tsv is written to
    output_dir.
    """
    if not sizes:
        raise ConfigurationError("sweep needs at least one d_adapter value")
    variants = [abconfig.Variant(f"d_adapter={n}", {"d_adapter": n}) for n in sizes]
    results = run_variants(base, variants, output_dir, console)
    rows = [
        {
            "d_adapter": n,
            "trainable_params": r.result.audit.trainable,
            "encoder_trainable": r.result.audit.encoder_trainable,
            "bleu": round(r.result.report.bleu, 2),
            "exact_match": round(r.result.report.exact_match, 4),
        }
        for n, r in zip(sizes, results)
    ]
    return rows, write_table(rows, os.path.join(output_dir, "sweep.tsv"))
