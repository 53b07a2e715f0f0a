"""prunekit command-line interface.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .checkpoint import load_model, save_model
from .data import (
    gen_corpus,
    gen_ood_corpus,
    load_jsonl,
    make_task,
    save_jsonl,
    train_test_split,
)
from .distill import augment, generate_kd
from .errors import ConfigError, StageFailure
from .metrics import make_scorer, score_report
from .model import ModelConfig, TrainConfig, build, train_full
from .numerics import Rng
from .pipeline import (
    ExperimentManifest,
    RecipeConfig,
    render_report,
    run_recipe,
    setup1_recipe,
    setup2_recipe,
)
from .pruning import (
    PruningStrategy,
    prune_iteratively,
    prune_middle,
    prune_with_recovery,
)
from .quant import quantize_model


@click.group()
def main():
    """Desk-scale compression lab: pruning, NF4 quantization, LoRA, KD."""


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@main.command()
@click.option("--recipe", "recipe_path", type=click.Path(exists=True),
              help="recipe JSON file")
@click.option("--preset", type=click.Choice(["setup1", "setup2"]),
              help="built-in recipe preset (alternative to --recipe)")
@click.option("--out", "out_dir", default=None, help="output directory override")
@click.option("--seed", default=0, show_default=True)
@click.option("--force", is_flag=True, help="recompute cached stages")
def run(recipe_path, preset, out_dir, seed, force):
    """Run a multi-stage recipe and write its manifest."""
    try:
        if recipe_path:
            config = RecipeConfig.from_json(recipe_path)
            if out_dir:
                config.out_dir = out_dir
        elif preset == "setup1":
            config = setup1_recipe(out_dir=out_dir or "runs/setup1", seed=seed)
        elif preset == "setup2":
            config = setup2_recipe(out_dir=out_dir or "runs/setup2", seed=seed)
        else:
            raise ConfigError("pass --recipe FILE or --preset setup1|setup2")
    except ConfigError as exc:
        _fail(exc, 2)
    try:
        manifest = run_recipe(config, force=force)
    except ConfigError as exc:
        _fail(exc, 2)
    except StageFailure as exc:
        _fail(exc, 3)
    text, _ = render_report(manifest)
    click.echo(text)
    click.echo(f"manifest: {Path(config.out_dir) / 'manifest.json'}")


@main.command("gen-data")
@click.option("--task", "task_kind", default="cipher", show_default=True,
              type=click.Choice(["cipher"]))
@click.option("--n", default=400, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--vocab", default=24, show_default=True)
@click.option("--window", default=2, show_default=True)
@click.option("--min-len", default=4, show_default=True)
@click.option("--max-len", default=7, show_default=True)
@click.option("--test-size", default=20, show_default=True)
@click.option("--dev-size", default=16, show_default=True)
@click.option("--ood-n", default=0, show_default=True,
              help="also emit an out-of-domain corpus of this size")
@click.option("--out", "out_dir", required=True, type=click.Path())
def gen_data(task_kind, n, seed, vocab, window, min_len, max_len,
             test_size, dev_size, ood_n, out_dir):
    """Generate a synthetic parallel corpus (plus optional OOD variant)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        task = make_task(vocab, window, min_len, max_len, seed)
        corpus = train_test_split(gen_corpus(task, n, seed), test_size, seed, dev_size)
    except ValueError as exc:
        _fail(exc, 2)
    save_jsonl(corpus, out / "corpus.jsonl")
    click.echo(f"wrote {len(corpus)} segments to {out / 'corpus.jsonl'}")
    if ood_n:
        ood = gen_ood_corpus(task, ood_n, seed + 1)
        save_jsonl(ood, out / "ood.jsonl")
        click.echo(f"wrote {len(ood)} out-of-domain segments to {out / 'ood.jsonl'}")


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=12, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", default=3e-3, show_default=True)
@click.option("--weight-decay", default=0.1, show_default=True)
@click.option("--vocab", default=24, show_default=True)
@click.option("--d-model", default=32, show_default=True)
@click.option("--heads", default=4, show_default=True)
@click.option("--d-ff", default=64, show_default=True)
@click.option("--enc-layers", default=2, show_default=True)
@click.option("--dec-layers", default=8, show_default=True)
@click.option("--max-positions", default=24, show_default=True)
def train(data_path, out_path, seed, epochs, batch_size, lr, weight_decay,
          vocab, d_model, heads, d_ff, enc_layers, dec_layers, max_positions):
    """Train a fresh model on a JSONL corpus and save a checkpoint."""
    try:
        config = ModelConfig(vocab_size=vocab, d_model=d_model, n_heads=heads,
                             d_ff=d_ff, encoder_layers=enc_layers,
                             decoder_layers=dec_layers, max_positions=max_positions)
    except ConfigError as exc:
        _fail(exc, 2)
    corpus = load_jsonl(data_path)
    rng = Rng(seed)
    model = build(config, rng.split("init"))
    _, curve = train_full(model, corpus,
                          TrainConfig(epochs, batch_size, lr, weight_decay),
                          rng.split("train"))
    save_model(model, out_path, stage="train_full", seed=seed)
    click.echo(f"final loss {curve[-1]:.4f}; checkpoint: {out_path}")


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True),
              help="corpus with a dev split for importance evaluation")
@click.option("--strategy", default="iterative", show_default=True,
              type=click.Choice(["iterative", "middle", "recovery"]))
@click.option("--layers", default=2, show_default=True)
@click.option("--pool", default="decoder_only", show_default=True,
              type=click.Choice(["decoder_only", "encoder_and_decoder"]))
@click.option("--metric", default="chrf++", show_default=True,
              type=click.Choice(["bleu", "chrf", "chrf++"]))
@click.option("--eval-split", default="dev", show_default=True)
@click.option("--max-len", default=1024, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--plan-out", default=None, type=click.Path())
def prune(ckpt_path, data_path, strategy, layers, pool, metric, eval_split,
          max_len, seed, out_path, plan_out):
    """Prune a checkpoint and save the pruned model plus its plan."""
    model = load_model(ckpt_path)
    corpus = load_jsonl(data_path)
    kind = {"iterative": "iterative", "middle": "middle",
            "recovery": "iterative_recovery"}[strategy]
    try:
        strat = PruningStrategy(kind, layers, pool,
                                selection_metric=make_scorer(metric),
                                eval_split=eval_split)
        if kind == "middle":
            pruned, plan = prune_middle(model, strat)
        else:
            devset = corpus.split(eval_split) if eval_split in corpus.splits \
                else corpus.segments
            if kind == "iterative":
                pruned, plan = prune_iteratively(model, strat, devset, max_len)
            else:
                pruned, plan = prune_with_recovery(
                    model, strat, devset, TrainConfig(), corpus, Rng(seed), max_len)
    except (ConfigError, ValueError) as exc:
        _fail(exc, 2)
    save_model(pruned, out_path, stage="prune", seed=seed)
    if plan_out:
        plan.save(plan_out)
    removed = ", ".join(str(lid) for lid in plan.removed)
    click.echo(f"removed [{removed}]; checkpoint: {out_path}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--block-size", default=64, show_default=True)
@click.option("--double-quant/--no-double-quant", default=True, show_default=True)
def quantize(in_path, out_path, block_size, double_quant):
    """NF4-quantize every linear matrix of a checkpoint."""
    model = load_model(in_path)
    try:
        quantize_model(model, block_size=block_size, double_quant=double_quant)
    except Exception as exc:
        _fail(exc, 2)
    save_model(model, out_path, stage="quantize")
    click.echo(f"quantized checkpoint: {out_path}")


@main.command()
@click.option("--teacher", "teacher_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--max-len", default=1024, show_default=True)
@click.option("--dedup-on", default="pair", show_default=True,
              type=click.Choice(["pair", "target"]))
def distill(teacher_path, data_path, out_path, max_len, dedup_on):
    """Decode the corpus train split with a teacher and write the
    dedup-augmented corpus."""
    teacher = load_model(teacher_path)
    corpus = load_jsonl(data_path)
    segments = corpus.split("train") if "train" in corpus.splits else corpus.segments
    kd = generate_kd(teacher, [s.source for s in segments], max_len=max_len)
    augmented = augment(segments, kd, dedup_on=dedup_on)
    save_jsonl(augmented, out_path)
    click.echo(f"{len(segments)} authentic + {len(kd)} distilled -> "
               f"{len(augmented)} after dedup: {out_path}")


@main.command()
@click.option("--metric", default="chrf++", show_default=True,
              type=click.Choice(["bleu", "chrf", "chrf++"]))
@click.option("--hyp", "hyp_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
def score(metric, hyp_path, ref_path):
    """Score two line-aligned UTF-8 text files; prints the report as JSON."""
    hyps = Path(hyp_path).read_text(encoding="utf-8").splitlines()
    refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
    try:
        report = score_report(make_scorer(metric), hyps, refs)
    except ValueError as exc:
        _fail(exc, 2)
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True, help="print the JSON payload")
def report(manifest_path, as_json):
    """Render a manifest as a table (or JSON with --json)."""
    data = ExperimentManifest.load(manifest_path)
    text, payload = render_report(data)
    click.echo(json.dumps(payload, indent=2) if as_json else text)


if __name__ == "__main__":
    main()
