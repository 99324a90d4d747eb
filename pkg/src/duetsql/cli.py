"""Command-line front end.

Verbs: corpus, train {lms|warmup|parser|dual|cotrain}, ablate, eval, infer,
analyze, dump-grammar. Exit codes: 0 success, 2 config error, 3 dependency
error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as pl
from . import sqlcore as sc
from .checkpoint import CheckpointError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DATA = 4


def build_arg_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="duetsql",
                                   description="Decoupled multi-turn text-to-SQL workbench.")
    sub = root.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")

    common(sub.add_parser("corpus", help="generate the synthetic benchmark"))

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("stage", choices=["lms", "warmup", "parser", "dual", "cotrain"])
    common(train)

    ablate = sub.add_parser("ablate", help="run the six-variant ablation ladder")
    common(ablate)

    ev = sub.add_parser("eval", help="evaluate a trained pipeline on the dev split")
    ev.add_argument("--rewriter", default="dual",
                    choices=["dual", "warmup", "cotrain", "none"])
    common(ev)

    infer = sub.add_parser("infer", help="rewrite one question and parse it")
    infer.add_argument("--question", required=True)
    infer.add_argument("--history", action="append", default=[],
                       help="prior turn (repeatable, oldest first)")
    infer.add_argument("--schema", required=True, help="schema id from schemas.json")
    infer.add_argument("--rewriter", default="dual", choices=["dual", "warmup", "cotrain"])
    common(infer)

    analyze = sub.add_parser("analyze", help="two-phase error attribution on dev")
    common(analyze)

    dump = sub.add_parser("dump-grammar", help="print the SQL grammar table")
    dump.add_argument("--config", default=None)
    return root


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.command == "dump-grammar":
            print("\n".join(sc.grammar_table_lines()))
            return EXIT_OK

        cfg = pl.load_config(args.config, seed_override=args.seed, out_override=args.out)

        if args.command == "corpus":
            info = pl.stage_corpus(cfg, force=args.force)
            print(f"wrote {info['dialogues']} dialogues / {info['turns']} turns "
                  f"to {cfg.out_dir}")
        elif args.command == "train":
            if args.stage == "lms":
                pl.stage_lms(cfg, force=args.force)
            elif args.stage == "warmup":
                pl.stage_warmup(cfg, force=args.force)
            elif args.stage == "parser":
                pl.stage_parser(cfg, force=args.force)
            elif args.stage == "dual":
                paths = pl.paths_for(cfg)
                for name, stage in (("warmup", "train warmup"), ("lm_c", "train lms"),
                                    ("parser", "train parser")):
                    pl._require(paths.ckpt(name, cfg.seed), stage)
                pl.stage_dual(cfg, force=args.force)
            else:
                paths = pl.paths_for(cfg)
                for name, stage in (("warmup", "train warmup"), ("parser", "train parser")):
                    pl._require(paths.ckpt(name, cfg.seed), stage)
                pl.stage_cotrain(cfg, force=args.force)
            print(f"stage {args.stage} done (seed {cfg.seed})")
        elif args.command == "ablate":
            doc = pl.run_ablate(cfg)
            for variant in pl.ABLATION_VARIANTS:
                row = doc["variants"][variant]
                qms = " ".join(f"s{s}={row[s]['question_match']:.3f}" for s in sorted(row))
                print(f"{variant:<20} {qms}")
        elif args.command == "eval":
            report = pl.run_eval(cfg, rewriter_name=args.rewriter)
            print(report.to_text_table(), end="")
        elif args.command == "infer":
            rewritten, sql = pl.run_infer(cfg, args.question, args.history, args.schema,
                                          rewriter_name=args.rewriter)
            print(f"rewrite: {rewritten}")
            print(f"sql:     {sql}")
        elif args.command == "analyze":
            report = pl.run_analyze(cfg)
            print(json.dumps(report.to_json_dict()["overall"], sort_keys=True))
        return EXIT_OK
    except pl.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.DependencyError as err:
        print(f"dependency error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (pl.DataError, CheckpointError, FileNotFoundError, sc.SchemaError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
