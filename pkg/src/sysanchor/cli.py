"""Command-line surface.

Subcommands: train, eval, probe, placements, lora-rank, flops, spans.
Config files are flat ``key = value`` text; every random choice derives
from the config seed, so identical configs give identical outputs.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import budget, checkpoint, probes, spans, training
from . import corpus as corpus_mod
from . import model as model_mod
from .tokenizer import ToyTokenizer


@dataclasses.dataclass
class HarnessConfig:
    pretrain_steps: int = 0
    pretrain_corpus: int = 2048
    train_steps: int = 0  # 0 derives step count from epochs
    corpus_size: int = 2048
    adversarial_rate: float = 0.3
    n_eval: int = 64
    min_content: int = 3
    max_content: int = 8
    checkpoint_every: int = 0


def _coerce(value, typ):
    if typ is bool:
        return value.lower() in ("1", "true", "yes")
    return typ(value)


def parse_config(path):
    """Flat key=value file split across model, training and harness configs."""
    fields = {}
    for cls in (model_mod.ModelConfig, training.TrainConfig, HarnessConfig):
        for f in dataclasses.fields(cls):
            fields.setdefault(f.name, []).append((cls, f.type))
    raw = {model_mod.ModelConfig: {}, training.TrainConfig: {}, HarnessConfig: {}}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            for cls, ftype in fields[key]:
                if not isinstance(ftype, type):
                    ftype = {"int": int, "float": float, "bool": bool}.get(str(ftype), str)
                raw[cls][key] = _coerce(value, ftype)
    return (
        model_mod.ModelConfig(**raw[model_mod.ModelConfig]),
        training.TrainConfig(**raw[training.TrainConfig]),
        HarnessConfig(**raw[HarnessConfig]),
    )


def _write_or_print(text, path):
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(args):
    model_cfg, train_cfg, harness = parse_config(args.config)
    if model_cfg.adapter == "none":
        raise ValueError("training requires an adapter kind (cal or parallel_mlp)")
    os.makedirs(args.out_dir, exist_ok=True)
    tok = ToyTokenizer()
    task = corpus_mod.RuleTask(
        tok, harness.min_content, harness.max_content, max_t=model_cfg.max_t
    )
    backbone_weights = None
    if harness.pretrain_steps > 0:
        echo = corpus_mod.generate_echo_corpus(tok, harness.pretrain_corpus, train_cfg.seed)
        backbone_weights = training.pretrain_backbone(
            dataclasses.replace(model_cfg, adapter="none"),
            echo, train_cfg, harness.pretrain_steps, seed=train_cfg.seed,
        )
    m = model_mod.build_model(model_cfg, seed=train_cfg.seed, backbone_weights=backbone_weights)
    data = corpus_mod.generate_corpus(
        task, harness.corpus_size, train_cfg.seed + 1, harness.adversarial_rate
    )
    state = training.train(
        m, data, train_cfg,
        total_steps=harness.train_steps or None,
        log_path=os.path.join(args.out_dir, "train_log.csv"),
        checkpoint_every=harness.checkpoint_every or None,
        checkpoint_dir=args.out_dir,
    )
    final = os.path.join(args.out_dir, "model.clrx")
    checkpoint.save_model(m, final)
    training.save_train_state(state, os.path.join(args.out_dir, "train_state.clrx"))
    print(f"trained {state.step} steps; final loss {state.history[-1].loss:.6f}")
    print(f"checkpoint: {final}")
    return 0


def _eval_loss(m, data, batch_size=16):
    from . import autograd as ag

    losses = []
    with ag.no_grad():
        for start in range(0, len(data), batch_size):
            tokens, bounds, mask = training.collate(data[start : start + batch_size])
            losses.append(float(model_mod.loss_on_batch(m, tokens, bounds, mask).data))
    return float(np.mean(losses))


def cmd_eval(args):
    model_cfg, train_cfg, harness = parse_config(args.config)
    m = checkpoint.load_model(model_cfg, args.checkpoint)
    tok = ToyTokenizer()
    task = corpus_mod.RuleTask(
        tok, harness.min_content, harness.max_content, max_t=model_cfg.max_t
    )
    clean = corpus_mod.evaluate_adherence(m, task, harness.n_eval, train_cfg.seed + 2)
    adv = corpus_mod.evaluate_adherence(
        m, task, harness.n_eval, train_cfg.seed + 3, adversarial=True
    )
    data = corpus_mod.generate_corpus(
        task, min(harness.corpus_size, 256), train_cfg.seed + 4, harness.adversarial_rate
    )
    loss = _eval_loss(m, data)
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    text = f"# eval_loss={loss:.8g}\nmodel,adherence,adversarial_adherence\n{name},{clean:.6g},{adv:.6g}\n"
    _write_or_print(text, args.out)
    return 0


def cmd_probe(args):
    model_cfg, train_cfg, harness = parse_config(args.config)
    m = checkpoint.load_model(model_cfg, args.checkpoint)
    tok = ToyTokenizer()
    task = corpus_mod.RuleTask(
        tok, harness.min_content, harness.max_content, max_t=model_cfg.max_t
    )
    data = corpus_mod.generate_corpus(task, args.batch, train_cfg.seed + 5, 0.0)
    tokens, bounds, _ = training.collate(data)
    records = probes.measure_magnitudes(m, tokens, bounds)
    _write_or_print(probes.magnitude_csv(records), args.out)
    if args.kv_steps:
        one = data[0]
        counts = probes.kv_cache_report(
            m,
            one.tokens[None, :],
            spans.BatchBounds(np.array([one.bounds], dtype=np.int64)),
            args.kv_steps,
        )
        kv_text = "step,kv_elements\n" + "".join(
            f"{i},{c}\n" for i, c in enumerate(counts)
        )
        _write_or_print(kv_text, args.kv_out)
    return 0


def cmd_placements(args):
    names = model_mod.PLACEMENT_NAMES if args.config == "all" else (args.config.upper(),)
    lines = ["config,layer"]
    for name in names:
        cfg = model_mod.resolve_placement(name, args.layers)
        lines.extend(f"{cfg.name},{pos}" for pos in cfg.positions)
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


def cmd_lora_rank(args):
    problem = budget.LoraBudgetProblem(
        p_target=args.target,
        n_layers=args.layers,
        hidden=args.hidden,
        kv_dim=args.kv_dim,
        intermediate=args.intermediate,
        rank_cap=args.cap,
    )
    sol = budget.solve_lora_rank(problem)
    if args.csv:
        lines = ["key,value", f"rank,{sol.rank}", f"alpha,{sol.alpha}",
                 f"capped,{sol.capped}", f"realized_params,{sol.realized_params}",
                 f"target_params,{problem.p_target}"]
        lines += [f"rank_{mod},{r}" for mod, r in sol.module_ranks.items()]
        _write_or_print("\n".join(lines) + "\n", None)
    else:
        print(f"rank           {sol.rank}")
        print(f"alpha          {sol.alpha}")
        print(f"capped         {sol.capped}")
        print(f"target params  {problem.p_target}")
        print(f"realized       {sol.realized_params}")
        width = max(len(m) for m in sol.module_ranks)
        for mod, r in sol.module_ranks.items():
            print(f"  {mod:<{width}} rank {r}")
    return 0


def cmd_flops(args):
    b = budget.FlopBudget(p_base=args.pb, p_adapter=args.pa, seq_len=args.seq)
    rows = []
    for method in (budget.CAL_METHOD, budget.LORA_METHOD):
        c = budget.flops(method, b)
        rows.append((method, c.forward, c.backward, c.total))
    rho = budget.speedup_ratio(b)
    if args.csv:
        lines = ["method,forward,backward,total"]
        lines += [f"{m},{f},{bk},{t}" for m, f, bk, t in rows]
        lines.append(f"speedup,,,{rho:.6g}")
        _write_or_print("\n".join(lines) + "\n", None)
    else:
        print(f"{'method':<8} {'forward':>14} {'backward':>14} {'total':>14}")
        for m, f, bk, t in rows:
            print(f"{m:<8} {f:>14} {bk:>14} {t:>14}")
        print(f"speedup ratio: {rho:.6g}")
    return 0


def cmd_spans(args):
    dialect = spans.CHATML if args.dialect == "chatml" else spans.LLAMA3_HEADER
    stream = open(args.file) if args.file else sys.stdin
    try:
        for line in stream:
            tokens = line.split()
            if not tokens:
                continue
            b = spans.detect_span(tokens, dialect)
            print(f"{b.s}\t{b.e}")
    finally:
        if args.file:
            stream.close()
    return 0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="sysanchor", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train adapters from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="adherence and loss of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="activation-magnitude heatmap and cache report")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--kv-steps", type=int, default=0)
    p.add_argument("--kv-out", default=None)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("placements", help="adapter layer positions per strategy")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--config", default="all")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_placements)

    p = sub.add_parser("lora-rank", help="solve the budget-matched low-rank config")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--kv-dim", type=int, required=True)
    p.add_argument("--intermediate", type=int, required=True)
    p.add_argument("--cap", type=int, default=512)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_lora_rank)

    p = sub.add_parser("flops", help="training-cost model and speedup ratio")
    p.add_argument("--pb", type=int, required=True)
    p.add_argument("--pa", type=int, required=True)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("spans", help="system-span bounds of whitespace-tokenized lines")
    p.add_argument("file", nargs="?", default=None)
    p.add_argument("--dialect", choices=("chatml", "llama3"), default="chatml")
    p.set_defaults(fn=cmd_spans)

    return parser


def cli(argv):
    """Run one invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (BrokenPipeError, KeyboardInterrupt):
        raise
    except Exception as exc:
        print(f"sysanchor: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    return cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
