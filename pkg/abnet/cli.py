import functools
import os
from dataclasses import replace

import click
from rich.console import Console
from rich.table import Table

from abnet import config
from abnet import pipeline
from abnet.checkpoint import load_checkpoint, save_checkpoint
from abnet.data import gen_synthetic, read_pairs, split_path
from abnet.decoding import decode as decode_source
from abnet.errors import AbnetError
from abnet.evaluation import corpus_bleu, exact_match, parameter_audit, render_audit
from abnet.logger import setup_logger
from abnet.model import assemble_abnet
from abnet.tokenizer import decode as detokenize, encode, load_vocab, save_vocab
from abnet.training import MetricsLog, encode_corpus, mlm_accuracy, pretrain_backbone
from abnet.utils import seed_everything


def fail(ctx, message):
    click.echo(f"Error: {message}", err=True)
    ctx.exit(1)


def reports_errors(command):
    """Turn library errors into a one-line diagnostic and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (AbnetError, FileNotFoundError) as e:
            fail(click.get_current_context(), e)

    return wrapper


@click.group()
@click.option(
    "--config",
    "-c",
    "config_path",
    default=None,
    help="Path to configuration TOML file.",
)
@click.option(
    "--set",
    "-s",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a configuration key (repeatable).",
)
@click.option("--debug", is_flag=True, help="Enable debug logging.")
@click.pass_context
def main(ctx, config_path, overrides, debug):
    """
    abnet CLI: pre-train BERT backbones, fine-tune adapters, decode with
    Mask-Predict or beam search.
    """
    try:
        values = config.load_config(config_path)
        values.update(config.parse_overrides(overrides))
        spec = config.build_spec(values)
    except (AbnetError, FileNotFoundError) as e:
        fail(ctx, f"loading configuration: {e}")
    level = "DEBUG" if debug else "INFO"
    setup_logger("abnet", None, level=level, console=True)
    ctx.obj = {"values": values, "spec": spec, "config_path": config_path, "level": level}


def _paths(spec):
    out = spec.output_dir
    return {
        "src_vocab": os.path.join(out, "vocab.src.txt"),
        "tgt_vocab": os.path.join(out, "vocab.tgt.txt"),
        "source": os.path.join(out, "checkpoints", "backbone-source.ckpt"),
        "target": os.path.join(out, "checkpoints", "backbone-target.ckpt"),
        "model": os.path.join(out, "checkpoints", "abnet.ckpt"),
    }


def _vocabularies(spec, splits):
    """Load the run's vocabularies, building them from the training split if absent."""
    paths = _paths(spec)
    if os.path.exists(paths["src_vocab"]) and os.path.exists(paths["tgt_vocab"]):
        return (
            load_vocab(paths["src_vocab"], spec.lowercase),
            load_vocab(paths["tgt_vocab"], spec.lowercase),
        )
    src_vocab, tgt_vocab = pipeline.build_vocabularies(splits["train"], spec)
    save_vocab(src_vocab, paths["src_vocab"])
    save_vocab(tgt_vocab, paths["tgt_vocab"])
    return src_vocab, tgt_vocab


def _model_config(spec, src_vocab, tgt_vocab):
    return replace(spec.model, src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab))


@main.command()
@click.pass_context
def show_config(ctx):
    """
    Show the resolved configuration.
    """
    table = Table(title="abnet configuration")
    table.add_column("key")
    table.add_column("value")
    for key, value in sorted(ctx.obj["spec"].to_flat_dict().items()):
        table.add_row(key, str(value))
    Console().print(table)


@main.command(name="gen-data")
@click.option("--out", "out_dir", default=None, help="Dataset directory (default: data_dir).")
@click.pass_context
@reports_errors
def gen_data(ctx, out_dir):
    """
    Generate the synthetic train/valid/test TSV files.
    """
    spec = ctx.obj["spec"]
    paths = gen_synthetic(spec.data, out_dir or spec.resolved_data_dir, spec.max_target_symbols())
    for split, path in paths.items():
        click.echo(f"{split}: {path}")


@main.command(name="build-vocab")
@click.pass_context
@reports_errors
def build_vocab_command(ctx):
    """
    Build the source and target vocabularies from the training split.
    """
    spec = ctx.obj["spec"]
    train = read_pairs(split_path(spec.resolved_data_dir, "train"))
    src_vocab, tgt_vocab = pipeline.build_vocabularies(train, spec)
    paths = _paths(spec)
    save_vocab(src_vocab, paths["src_vocab"])
    save_vocab(tgt_vocab, paths["tgt_vocab"])
    click.echo(f"source vocabulary: {len(src_vocab)} tokens -> {paths['src_vocab']}")
    click.echo(f"target vocabulary: {len(tgt_vocab)} tokens -> {paths['tgt_vocab']}")


@main.command()
@click.option(
    "--side",
    type=click.Choice(["source", "target"]),
    required=True,
    help="Which backbone to pre-train.",
)
@click.pass_context
@reports_errors
def pretrain(ctx, side):
    """
    MLM pre-training of one BERT backbone.
    """
    spec = ctx.obj["spec"]
    seed_everything(spec.seed)
    splits = pipeline.load_splits(spec)
    src_vocab, tgt_vocab = _vocabularies(spec, splits)
    model_config = _model_config(spec, src_vocab, tgt_vocab)
    column, vocab = (0, src_vocab) if side == "source" else (1, tgt_vocab)
    corpus = [pair[column] for pair in splits["train"]]
    valid = [pair[column] for pair in splits["valid"]]
    metrics_path = os.path.join(spec.output_dir, f"metrics.pretrain-{side}.tsv")
    with MetricsLog(metrics_path) as metrics:
        params = pretrain_backbone(
            corpus, vocab, model_config, spec.pretrain, side, valid=valid, metrics=metrics
        )
    path = _paths(spec)[side]
    save_checkpoint(params, model_config, path)
    if valid:
        accuracy = mlm_accuracy(
            params, encode_corpus(valid, vocab), vocab, model_config, side,
            spec.pretrain.mlm_mask_fraction, spec.seed,
        )
        click.echo(f"held-out MLM accuracy: {accuracy:.4f}")
    click.echo(f"{side} backbone saved to {path}")


@main.command()
@click.option(
    "--mode",
    type=click.Choice(["finetune-adapters", "finetune-full", "train-scratch"]),
    default=None,
    help="Training mode (default: from config).",
)
@click.pass_context
@reports_errors
def finetune(ctx, mode):
    """
    Assemble AB-Net from the pre-trained backbones and fine-tune it.
    """
    spec = ctx.obj["spec"]
    train_config = replace(spec.finetune, mode=mode) if mode else spec.finetune
    seed_everything(spec.seed)
    splits = pipeline.load_splits(spec)
    src_vocab, tgt_vocab = _vocabularies(spec, splits)
    model_config = _model_config(spec, src_vocab, tgt_vocab)
    paths = _paths(spec)
    backbones = {}
    if train_config.mode != "train-scratch":
        sides = ["source"] + (["target"] if model_config.decoder_kind == "adapter-bert" else [])
        for side in sides:
            backbones[side], _ = load_checkpoint(paths[side])
    params = assemble_abnet(model_config, backbones.get("source"), backbones.get("target"))
    summaries = pipeline.finetune_model(
        params,
        model_config,
        train_config,
        tgt_vocab,
        pipeline.encode_pairs(splits["train"], src_vocab, tgt_vocab),
        pipeline.encode_pairs(splits["valid"], src_vocab, tgt_vocab),
        os.path.join(spec.output_dir, "metrics.finetune.tsv"),
    )
    save_checkpoint(params, model_config, paths["model"])
    if summaries:
        click.echo(f"final training loss: {summaries[-1].mean_loss:.4f}")
    click.echo(f"model saved to {paths['model']}")


@main.command()
@click.argument("input_path", type=click.Path())
@click.option("--checkpoint", default=None, help="Model checkpoint (default: output_dir).")
@click.option("--mode", type=click.Choice(["auto", "parallel", "ar"]), default=None)
@click.option("--T", "iterations", type=int, default=None, help="Mask-Predict iterations.")
@click.option("--B", "length_beam", type=int, default=None, help="Length beam.")
@click.option("--beam", "beam_width", type=int, default=None, help="AR beam width.")
@click.option("--workers", type=int, default=None, help="Threads for length candidates.")
@click.option("--trace", is_flag=True, help="Print every Mask-Predict iteration.")
@click.option("--output", "-o", "output_path", default=None, help="Write hypotheses here.")
@click.pass_context
@reports_errors
def decode(ctx, input_path, checkpoint, mode, iterations, length_beam, beam_width,
           workers, trace, output_path):
    """
    Decode source sentences (one per line) with a fine-tuned model.
    """
    spec = ctx.obj["spec"]
    paths = _paths(spec)
    params, model_config = load_checkpoint(checkpoint or paths["model"])
    src_vocab = load_vocab(paths["src_vocab"], spec.lowercase)
    tgt_vocab = load_vocab(paths["tgt_vocab"], spec.lowercase)
    flags = {
        "mode": mode, "iterations": iterations, "length_beam": length_beam,
        "beam_width": beam_width, "workers": workers,
    }
    decode_config = replace(spec.decode, **{k: v for k, v in flags.items() if v is not None})

    def show(state):
        click.echo(
            f"  L={state.length} t={state.iteration}: "
            f"{detokenize(state.canvas.tolist(), tgt_vocab) or '-'} -> "
            f"{detokenize(state.tokens.tolist(), tgt_vocab)}"
        )

    if not os.path.exists(input_path):
        raise FileNotFoundError(f"Input file not found: {input_path}")
    with open(input_path, "r", encoding="utf-8") as f:
        sources = [line.strip() for line in f if line.strip()]
    lines = []
    for source in sources:
        if trace:
            click.echo(f"source: {source}")
        result = decode_source(
            encode(source, src_vocab), params, model_config, decode_config,
            on_iteration=show if trace else None,
        )
        lines.append(detokenize(result.tokens, tgt_vocab))
    if output_path:
        with open(output_path, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            click.echo(line)


@main.command()
@click.argument("hypotheses_path", type=click.Path())
@click.argument("references_path", type=click.Path())
@click.pass_context
@reports_errors
def score(ctx, hypotheses_path, references_path):
    """
    Corpus BLEU and exact match of a hypothesis file against references.
    """
    texts = []
    for path in (hypotheses_path, references_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            texts.append([line.split() for line in f.read().splitlines()])
    hypotheses, references = texts
    bleu = corpus_bleu(hypotheses, references)
    table = Table(title="Score")
    table.add_column("metric")
    table.add_column("value")
    table.add_row("BLEU", f"{bleu.bleu:.2f}")
    for n, p in enumerate(bleu.precisions, start=1):
        table.add_row(f"p{n}", f"{p:.4f}")
    table.add_row("brevity penalty", f"{bleu.brevity_penalty:.4f}")
    table.add_row("exact match", f"{exact_match(hypotheses, references):.4f}")
    Console().print(table)


@main.command()
@click.option("--checkpoint", default=None, help="Checkpoint (default: output_dir model).")
@click.pass_context
@reports_errors
def audit(ctx, checkpoint):
    """
    Count trainable and frozen parameters of a checkpoint.
    """
    params, _ = load_checkpoint(checkpoint or _paths(ctx.obj["spec"])["model"])
    click.echo(render_audit(parameter_audit(params)))


@main.command(name="pipeline")
@click.pass_context
@reports_errors
def pipeline_command(ctx):
    """
    Run the full experiment: data, pre-training, fine-tuning, decoding, scoring.
    """
    result = pipeline.run_pipeline(ctx.obj["spec"], log_level=ctx.obj["level"])
    click.echo(result.report.render())


@main.command()
@click.option(
    "--sizes",
    default="8,16,32,64",
    help="Comma-separated encoder-adapter widths (d_adapter).",
)
@click.option("--out", "out_dir", default=None, help="Sweep directory (default: output_dir/sweep).")
@click.pass_context
@reports_errors
def sweep(ctx, sizes, out_dir):
    """
    Vary the encoder-adapter width and tabulate parameters against BLEU.
    """
    try:
        widths = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        fail(ctx, f"--sizes must be comma-separated integers, got {sizes!r}")
    spec = ctx.obj["spec"]
    _, table = pipeline.run_sweep(
        ctx.obj["values"], widths, out_dir or os.path.join(spec.output_dir, "sweep")
    )
    click.echo(table)


@main.command()
@click.argument("suite_path", type=click.Path())
@click.option("--out", "out_dir", default=None, help="Suite directory (default: output_dir/ablation).")
@click.pass_context
@reports_errors
def ablate(ctx, suite_path, out_dir):
    """
    Run the named variants of an ablation suite and compare them.
    """
    variants = config.load_suite(suite_path)
    spec = ctx.obj["spec"]
    _, table = pipeline.run_ablation(
        ctx.obj["values"], variants, out_dir or os.path.join(spec.output_dir, "ablation")
    )
    click.echo(table)


if __name__ == "__main__":
    main()
