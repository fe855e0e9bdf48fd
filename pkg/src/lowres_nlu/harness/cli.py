"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure,
64 unknown or missing subcommand.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from ..parse_repr import ParseReprError
from .config import merged_config, typed
from .io import FormatError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID, EXIT_USAGE = 0, 1, 2, 64
SUBCOMMANDS = ("convert", "train", "eval", "augment", "refine", "bench")


def _write_report(path, report: dict) -> None:
    text = json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _seed(args, cfg) -> int:
    return typed(cfg, "seed", args.seed if args.seed is not None else 0, int)


def _torch_setup(seed: int):
    import torch
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch


# --------------------------------------------------------------------------
# convert

def cmd_convert(args, cfg) -> int:
    from .io import load_parse_records, record_to_tree, tree_record, write_jsonl
    records = load_parse_records(args.inp)
    to = args.to
    if to == "auto":
        to = "flat" if records and "parse" in records[0] else "tree"
    out = []
    for lineno, record in enumerate(records, 1):
        try:
            tree = record_to_tree(record)
            out.append(tree_record(tree, flat=(to == "flat")))
        except (ParseReprError, ValueError, KeyError, TypeError) as err:
            raise FormatError(args.inp, lineno, 1, str(err)) from err
    write_jsonl(args.out, out)
    return EXIT_OK


# --------------------------------------------------------------------------
# train

def _train_x2parser(args, cfg, seed):
    from .. import x2parser
    from .io import load_parse_jsonl
    trees = load_parse_jsonl(args.data)
    keys = {k: v for k, v in cfg.items() if k in x2parser.X2Config.__dataclass_fields__}
    model, examples = x2parser.build_model(trees, x2parser.X2Config.from_dict(keys), seed)
    steps = args.steps or typed(cfg, "steps", 300, int)
    history = x2parser.train(model, examples, steps=steps, batch_size=typed(cfg, "batch_size", 32, int),
                             lr=typed(cfg, "lr", 2e-3, float), seed=seed)
    if args.save:
        x2parser.save(model, args.save)
    return {"model": "x2parser", "steps": steps, "final_loss": history[-1],
            "train_exact_match": 100 * x2parser.exact_match_rate(model, examples), "examples": len(examples)}


def _train_tagger(args, cfg, seed):
    import torch
    from ..tagger import SequenceTagger, Vocab, pad_batch
    from .io import load_conll
    from .metrics import bio_f1
    data = load_conll(args.data)
    vocab = Vocab.build([s.tokens for s in data])
    labels = Vocab.build([s.labels for s in data], specials=("O",))
    model = SequenceTagger(len(vocab), len(labels), embed_dim=typed(cfg, "embed_dim", 64, int),
                           hidden=typed(cfg, "hidden", 64, int), encoder=cfg.get("encoder", "ort"),
                           layers=typed(cfg, "layers", 2, int), heads=typed(cfg, "heads", 4, int),
                           conv_kernel=typed(cfg, "conv_kernel", 3, int), use_crf=typed(cfg, "crf", True, bool))
    epochs = args.epochs or typed(cfg, "epochs", 5, int)
    bs = typed(cfg, "batch_size", 16, int)
    opt = torch.optim.Adam(model.parameters(), lr=typed(cfg, "lr", 1e-3, float))
    rng = np.random.default_rng(seed)
    loss = None
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for k in range(0, len(order), bs):
            batch = [data[i] for i in order[k:k + bs]]
            ids, mask = pad_batch([vocab.encode(s.tokens) for s in batch])
            tags, _ = pad_batch([labels.encode(s.labels) for s in batch])
            loss = model.loss(ids, mask, tags)
            opt.zero_grad()
            loss.backward()
            opt.step()
    ids, mask = pad_batch([vocab.encode(s.tokens) for s in data])
    pred = [labels.decode(p) for p in model.predict(ids, mask)]
    p, r, f = bio_f1([s.labels for s in data], pred)
    if args.save:
        torch.save({"vocab": vocab.itos, "labels": labels.itos, "state": model.state_dict()}, args.save)
    return {"model": "tagger", "epochs": epochs, "final_loss": float(loss.item()) if loss is not None else None,
            "train_precision": p, "train_recall": r, "train_f1": f, "sentences": len(data)}


def _train_coach(args, cfg, seed):
    import torch
    from ..coach import Coach, CoachConfig, CoachExample, read_descriptions, train_coach
    from ..embed_align import read_embeddings
    from ..tagger import Vocab
    from .io import load_conll
    from .metrics import bio_f1
    if not args.descriptions or not args.embeddings:
        raise ValueError("coach training needs --descriptions and --embeddings")
    descriptions = read_descriptions(args.descriptions)
    words, table = read_embeddings(args.embeddings)
    vocab = Vocab(words)
    full = np.zeros((len(vocab), table.shape[1]))
    for i, w in enumerate(words):
        full[vocab.stoi[w]] = table[i]
    data = load_conll(args.data)
    examples = []
    for s in data:
        types = tuple(s.meta["types"].split()) if "types" in s.meta else tuple(descriptions)
        unknown = [t for t in types if t not in descriptions]
        if unknown:
            raise ValueError(f"slot types without descriptions: {unknown}")
        examples.append(CoachExample(s.tokens, s.labels, types))
    ccfg = CoachConfig(hidden=typed(cfg, "hidden", 64, int), layers=typed(cfg, "layers", 1, int),
                       span_encoder=cfg.get("span_encoder", "recurrent"), beta=typed(cfg, "beta", 1.0, float),
                       warmup_epochs=typed(cfg, "warmup_epochs", 2, int),
                       use_templates=typed(cfg, "templates", True, bool), dropout=typed(cfg, "dropout", 0.3, float))
    model = Coach(vocab, full, descriptions, ccfg)
    epochs = args.epochs or typed(cfg, "epochs", 5, int)
    history = train_coach(model, examples, epochs=epochs, lr=typed(cfg, "lr", 1e-3, float), seed=seed)
    pred = [model.predict([ex.tokens], list(ex.types))[0] for ex in examples]
    p, r, f = bio_f1([ex.labels for ex in examples], pred)
    if args.save:
        torch.save({"vocab": vocab.itos, "state": model.state_dict(), "descriptions": descriptions}, args.save)
    return {"model": "coach", "epochs": epochs, "final_loss": history[-1], "train_precision": p,
            "train_recall": r, "train_f1": f, "sentences": len(examples)}


def cmd_train(args, cfg) -> int:
    seed = _seed(args, cfg)
    _torch_setup(seed)
    trainer = {"x2parser": _train_x2parser, "tagger": _train_tagger, "coach": _train_coach}[args.model]
    report = trainer(args, cfg, seed)
    report["seed"] = seed
    _write_report(args.report, report)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval

def cmd_eval(args, cfg) -> int:
    from .io import load_conll, load_parse_jsonl
    from .metrics import evaluate_parses, evaluate_tags
    if args.format == "conll":
        gold, pred = load_conll(args.gold), load_conll(args.pred)
        if len(gold) != len(pred):
            raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
        for k, (g, p) in enumerate(zip(gold, pred)):
            if g.tokens != p.tokens:
                raise ValueError(f"sentence {k + 1}: tokens differ between gold and prediction")
        report = evaluate_tags([g.labels for g in gold], [p.labels for p in pred])
    else:
        gold, pred = load_parse_jsonl(args.gold), load_parse_jsonl(args.pred)
        if len(gold) != len(pred):
            raise ValueError(f"{len(gold)} gold parses vs {len(pred)} predicted")
        report = evaluate_parses(gold, pred)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# augment

def _k(value: str):
    if value.lower() in ("inf", "infinity", "none"):
        return math.inf
    k = int(value)
    if k < 0:
        raise argparse.ArgumentTypeError("k must be >= 0")
    return k


def cmd_augment(args, cfg) -> int:
    from .. import augment
    from .io import load_conll, load_corpus_lines, write_conll, write_jsonl
    seed = _seed(args, cfg)
    if args.action == "shuffle":
        data = [(s.tokens, s.labels) for s in load_conll(args.inp)]
        if args.copies:
            out = augment.shuffle_augment(data, args.k, args.copies, seed)
        else:
            out = augment.make_noisy_testset(data, args.k, seed)
        write_conll(args.out, out)
        report = {"action": "shuffle", "k": str(args.k), "copies": args.copies, "input": len(data), "output": len(out)}
    elif args.action == "mask":
        lines = load_corpus_lines(args.inp)
        records, masked = [], 0
        for i, line in enumerate(lines):
            tokens = line.split()
            plan = augment.token_mask(tokens, args.rate, [seed, i])
            if args.span:
                plan = augment.span_mask(tokens, args.rate, attach=args.attach, plan=plan)
            masked += len(plan.masked)
            records.append({"tokens": tokens, "masked": list(plan.masked), "actions": list(plan.actions)})
        write_jsonl(args.out, records)
        report = {"action": "mask", "span": args.span, "rate": args.rate, "sentences": len(lines), "masked": masked}
    elif args.action == "select":
        lines = load_corpus_lines(args.inp)
        entities = load_corpus_lines(args.entities) if args.entities else []
        spec = augment.CorpusSpec(args.level, entities, args.min_entities)
        chosen = augment.select_corpus(lines, spec)
        with open(args.out, "w", encoding="utf-8") as f:
            f.writelines(s + "\n" for s in chosen)
        report = {"action": "select", "level": args.level, "input": len(lines), "selected": len(chosen),
                  "ratio": augment.selection_ratio(chosen, lines)}
    else:
        entity, task = load_corpus_lines(args.inp), load_corpus_lines(args.task)
        merged = augment.integrate_corpora(entity, task, args.factor, seed)
        with open(args.out, "w", encoding="utf-8") as f:
            f.writelines(s + "\n" for s in merged)
        report = {"action": "integrate", "entity": len(entity), "task": len(task), "factor": args.factor,
                  "output": len(merged)}
    report["seed"] = seed
    _write_report(args.report, report)
    return EXIT_OK


# --------------------------------------------------------------------------
# refine

def cmd_refine(args, cfg) -> int:
    from .. import embed_align as ea
    from .io import load_dict_tsv
    sw, X = ea.read_embeddings(args.source)
    tw, Z = ea.read_embeddings(args.target)
    X, Z = ea.preprocess(X), ea.preprocess(Z)
    pairs = load_dict_tsv(args.seed_dict) if args.seed_dict else ea.default_seed_dictionary(args.pair)
    threshold = typed(cfg, "threshold", args.threshold, float)
    res = ea.refine(X, Z, ea.seed_index_pairs(pairs, sw, tw), threshold, args.max_iters)
    if args.out_emb:
        ea.write_embeddings(args.out_emb, sw, X @ res.W)
    W = res.W
    report = {"iterations": res.iterations, "converged": res.converged, "objective": res.history,
              "seed_distance": res.distances, "threshold": threshold, "pairs": len(pairs),
              "orthogonality_error": float(np.linalg.norm(W.T @ W - np.eye(W.shape[0])))}
    _write_report(args.report, report)
    return EXIT_OK


# --------------------------------------------------------------------------
# bench

def cmd_bench(args, cfg) -> int:
    seed = _seed(args, cfg)
    _torch_setup(seed)
    from .. import x2parser
    from .bench import bench_latency, structural_view
    if args.checkpoint:
        model = x2parser.load(args.checkpoint)
    else:
        from ..synthetic import ToyGrammar
        model, _ = x2parser.build_model(ToyGrammar().dataset(50, seed), seed=seed)
        model.eval()
    buckets = [int(b) for b in args.buckets.split(",")]
    rows = bench_latency(model, buckets, args.repeats, args.warmup, seed)
    report = {"buckets": buckets, "repeats": args.repeats, "warmup": args.warmup, "seed": seed,
              "rows": structural_view(rows)}
    _write_report(args.report, report)
    if args.timings:
        with open(args.timings, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2)
            f.write("\n")
    for r in rows:
        print(f"len {r['length']:>3}  median {r['median_ms']:.3f} ms  decoder calls {r['decoder_calls']}",
              file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowres-nlu", description="low-resource NLU toolkit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        return sp

    c = common(sub.add_parser("convert", help="tree <-> flat parse JSONL"))
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--to", choices=("auto", "flat", "tree"), default="auto")

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--model", choices=("x2parser", "coach", "tagger"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--descriptions")
    t.add_argument("--embeddings")
    t.add_argument("--save")
    t.add_argument("--report")

    e = common(sub.add_parser("eval", help="score predictions against gold"))
    e.add_argument("--gold", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--format", choices=("parse-jsonl", "conll"), default="parse-jsonl")
    e.add_argument("--out")

    a = common(sub.add_parser("augment", help="shuffle, mask, select or integrate"))
    a.add_argument("action", choices=("shuffle", "mask", "select", "integrate"))
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--report")
    a.add_argument("--k", type=_k, default=math.inf)
    a.add_argument("--copies", type=int, default=0)
    a.add_argument("--rate", type=float, default=0.15)
    a.add_argument("--span", action="store_true")
    a.add_argument("--attach", choices=("nearest", "left"), default="nearest")
    a.add_argument("--entities")
    a.add_argument("--level", choices=("domain", "entity", "task"), default="entity")
    a.add_argument("--min-entities", type=int, default=2)
    a.add_argument("--task", help="task-level corpus for integrate")
    a.add_argument("--factor", type=int, default=2)

    r = common(sub.add_parser("refine", help="orthogonal embedding refinement"))
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--seed-dict")
    r.add_argument("--pair", choices=("en-es", "en-th"), default="en-es")
    r.add_argument("--threshold", type=float, default=0.25)
    r.add_argument("--max-iters", type=int, default=10)
    r.add_argument("--out-emb")
    r.add_argument("--report")

    b = common(sub.add_parser("bench", help="parser latency by output length"))
    b.add_argument("--checkpoint")
    b.add_argument("--buckets", default="5,10,20,40")
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--report")
    b.add_argument("--timings")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK
        parser.print_usage(sys.stderr)
        print(f"lowres-nlu: unknown subcommand {argv[0]!r}" if argv else "lowres-nlu: missing subcommand",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    handlers = {"convert": cmd_convert, "train": cmd_train, "eval": cmd_eval, "augment": cmd_augment,
                "refine": cmd_refine, "bench": cmd_bench}
    try:
        cfg = merged_config(args.config, args.set)
        return handlers[args.command](args, cfg)
    except (FormatError, ParseReprError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
