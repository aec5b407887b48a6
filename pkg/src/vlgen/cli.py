"""Command-line entry point: ``vlgen <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 numeric abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, make_checkpoint, params_from_checkpoint, save_checkpoint
from .config import build, check_known, format_kv, load_config_file
from .data import CLS_ID, Corpus, detokenize, export_corpus, generate_corpus, load_corpus
from .decoding import DecodeConfig, caption_cross_entropy, decode
from .encoders import EncoderConfig
from .errors import CheckpointError, NumericError, ValidationError
from .metrics import bleu1, bleu4
from .prompting import (FreezeSpec, LabelSet, PromptTemplate, PromptTuner, context_template, generate_answers,
                        has_task, natural_template, rank_answers, task_fields)
from .retrieval import RetrievalConfig, format_rankings, recall_at_k, retrieve
from .studies import STUDY_KINDS, StudySpec, run_study
from .train import TrainConfig, pretrain

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
STUDY_KEYS = ("n_train", "n_test", "pretrain_steps", "finetune_steps")

log = logging.getLogger("vlgen")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with the numeric-abort code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="file of 'key = value' lines")
    p.add_argument("--out", help="output path")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="corpus directory written by gen-data")
    p.add_argument("--n", type=int, default=256, help="examples to generate when --data is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlgen", description="Desk-scale unified vision-language transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and export a synthetic corpus")
    _common(p)
    p.add_argument("--n", type=int, default=2000)

    p = sub.add_parser("pretrain", help="train ITC + MLM + ITM")
    _common(p)
    _data_args(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--p-causal", type=float, default=0.5)
    p.add_argument("--log", help="metrics CSV path")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("finetune", help="prompt-based fine-tuning on a downstream task")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("vqa", "cls", "ve"), required=True)
    p.add_argument("--template", help="template file; overrides --prompt")
    p.add_argument("--prompt", choices=("natural", "context"), default="natural")
    p.add_argument("--ctx-len", type=int, default=16)
    p.add_argument("--position", choices=("begin", "mid"), default="mid")
    p.add_argument("--freeze", default="VE,TE,ME,heads,ctx_embeddings", help="components left trainable")
    p.add_argument("--ranking", action="store_true", help="single-[MASK] restricted ranking (bidirectional)")
    p.add_argument("--steps", type=int, default=100)

    p = sub.add_parser("decode", help="generate captions")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit", type=int, default=16)

    p = sub.add_parser("retrieve", help="two-stage image-text retrieval")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=("i2t", "t2i"), default="i2t")

    p = sub.add_parser("eval", help="caption and retrieval metrics for a checkpoint")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit", type=int, default=128)
    p.add_argument("--task", choices=("vqa", "cls", "ve"), help="also score a fine-tuned task")
    p.add_argument("--template", help="template file for --task")

    p = sub.add_parser("study", help="run an ablation grid")
    _common(p)
    p.add_argument("--kind", choices=STUDY_KINDS, required=True)
    p.add_argument("--grid", action="append", default=[], help="axis=v1,v2,... (repeatable)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    p.add_argument("--checkpoint", help="shared base checkpoint instead of pretraining per seed")
    return parser


# -- helpers -------------------------------------------------------------------------------------

def _config(args) -> dict:
    values = load_config_file(args.config)
    extra = {k: values.pop(k) for k in STUDY_KEYS if k in values}
    check_known(values, EncoderConfig, TrainConfig, DecodeConfig, RetrievalConfig)
    values.update(extra)
    return values


def _corpus(args) -> Corpus:
    if args.data:
        return load_corpus(args.data)
    return generate_corpus(args.seed, args.n)


def _write(out: str | None, text: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _template(args) -> PromptTemplate:
    if getattr(args, "template", None):
        return PromptTemplate.from_text(Path(args.template).read_text())
    if getattr(args, "prompt", "natural") == "context":
        return context_template(args.task, args.ctx_len, args.position)
    return natural_template(args.task)


def _parse_value(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


# -- subcommands --------------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> None:
    if not args.out:
        raise ValidationError("gen-data needs --out DIR")
    corpus = generate_corpus(args.seed, args.n)
    export_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")


def cmd_pretrain(args, cfg) -> None:
    corpus = _corpus(args)
    enc = build(EncoderConfig, {"vocab_size": len(corpus.vocab), **cfg})
    tc = build(TrainConfig, cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = args.out or "model.ckpt"
    res = pretrain(corpus, enc, args.p_causal, args.steps, args.seed, tc, log_path=args.log,
                   checkpoint_path=out, resume=resume)
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"step {last.step} L_itc {last.L_itc:.4f} L_mlm {last.L_mlm:.4f} L_itm {last.L_itm:.4f}")
    print(f"checkpoint written to {out}")


def cmd_finetune(args, cfg) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    corpus = _corpus(args)
    template = _template(args)
    tc = build(TrainConfig, cfg)
    tuner = PromptTuner(params, template, args.task, FreezeSpec.parse(args.freeze), ranking=args.ranking,
                        lr=tc.lr, weight_decay=tc.weight_decay, batch_size=tc.batch_size)
    examples = [e for e in corpus if has_task(e, args.task)]
    if not examples:
        raise ValidationError(f"corpus has no {args.task} annotations")
    losses = tuner.fit(examples, corpus.vocab, args.steps, np.random.default_rng([args.seed, 3]))
    out = args.out or "finetuned.ckpt"
    extra = {"task": args.task, "template": template.to_text().replace("\n", ";").rstrip(";")}
    save_checkpoint(out, make_checkpoint(params, ckpt.step, extra_config=extra))
    if losses:
        print(f"loss first {losses[0]:.4f} last {losses[-1]:.4f}")
    print(f"checkpoint written to {out}")


def cmd_decode(args, cfg) -> None:
    params = params_from_checkpoint(load_checkpoint(args.checkpoint))
    corpus = _corpus(args)
    dcfg = build(DecodeConfig, cfg)
    lines = ["index\tlogprob\tcaption\treference"]
    for e in corpus.examples[: args.limit]:
        res = decode(e.image, [CLS_ID], params, dcfg)
        lines.append(f"{e.index}\t{res.logprob:.4f}\t{detokenize(res.generated, corpus.vocab)}\t{e.caption_text}")
    _write(args.out, "\n".join(lines) + "\n")


def cmd_retrieve(args, cfg) -> None:
    params = params_from_checkpoint(load_checkpoint(args.checkpoint))
    corpus = _corpus(args)
    rcfg = build(RetrievalConfig, cfg)
    images = np.stack([e.image for e in corpus])
    out = retrieve(images, [e.caption for e in corpus], params, rcfg, args.direction)
    for w in out.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write(args.out, format_rankings(out))


def cmd_eval(args, cfg) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    corpus = _corpus(args)
    examples = corpus.examples[: args.limit]
    dcfg = build(DecodeConfig, cfg)
    hyps = [detokenize(decode(e.image, [CLS_ID], params, dcfg).generated, corpus.vocab) for e in examples]
    refs = [e.caption_text for e in examples]
    rcfg = build(RetrievalConfig, cfg)
    images = np.stack([e.image for e in examples])
    truth = list(range(len(examples)))
    i2t = retrieve(images, [e.caption for e in examples], params, rcfg, "i2t").item_lists()
    t2i = retrieve(images, [e.caption for e in examples], params, rcfg, "t2i").item_lists()
    result = {"n": len(examples), "B1": bleu1(hyps, refs), "B4": bleu4(hyps, refs),
              "caption_ce": caption_cross_entropy(examples, params)}
    for k in (1, 5, 10):
        result[f"i2t_R{k}"] = recall_at_k(i2t, truth, k)
        result[f"t2i_R{k}"] = recall_at_k(t2i, truth, k)
    if args.task:
        if args.template:
            template = PromptTemplate.from_text(Path(args.template).read_text())
        elif "template" in ckpt.config:
            template = PromptTemplate.from_text(ckpt.config["template"].replace(";", "\n"))
        else:
            template = natural_template(args.task)
        task_ex = [e for e in examples if has_task(e, args.task)]
        golds = [task_fields(e, args.task)["answer"] for e in task_ex]
        preds = generate_answers(params, template, args.task, task_ex, corpus.vocab)
        result[f"{args.task}_acc"] = sum(p == g for p, g in zip(preds, golds)) / max(len(golds), 1)
        if args.task == "ve":
            labels = LabelSet.build(("entailment", "neutral", "contradiction"), corpus.vocab)
            ranked = rank_answers(params, template, "ve", task_ex, corpus.vocab, labels)
            result["ve_1inK_acc"] = sum(p == g for p, g in zip(ranked, golds)) / max(len(golds), 1)
    _write(args.out, format_kv(result))


def cmd_study(args, cfg) -> None:
    grid = {}
    for item in args.grid:
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise ValidationError(f"--grid expects axis=v1,v2,..., got {item!r}")
        grid[key.strip()] = [_parse_value(v.strip()) for v in vals.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    budget = {k: cfg[k] for k in STUDY_KEYS if k in cfg}
    for k in ("batch_size", "lr"):
        if k in cfg:
            budget[k] = cfg[k]
    enc_keys = {f.name for f in dataclasses.fields(EncoderConfig)} & set(cfg)
    encoder = build(EncoderConfig, cfg) if enc_keys else None
    spec = StudySpec(args.kind, grid, seeds, args.out, checkpoint=args.checkpoint, encoder=encoder, **budget)
    report = run_study(spec)
    if not args.out:
        sys.stdout.write(report.to_tsv())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "study": cmd_study,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args, _config(args))
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
