"""Command-line driver for the staged pipeline.

Every command reads one JSON config (``--config``); relative paths in it are
resolved against the config file's directory. Exit status is 0 on success,
1 for bad input (config, data, ordering, checkpoint format) and 2 for any
other failure.

Typical run::

    langadapt make-toy-data --out work
    langadapt init-tokenizer --config work/config.json
    langadapt train-sft --config work/config.json
    langadapt train-dpo --config work/config.json
    langadapt adapt --config work/config.json
    langadapt eval --config work/config.json --checkpoint work/checkpoints/adapt.ckpt --out work/reports/adapt.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

from .adapters import AdaptedModel, LoraConfig, attach_lora, merge_lora
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, stage_entry
from .data import ToySizes, load_jsonl, make_toy_data
from .errors import ConfigError, DataError, LangAdaptError, OrderingError, ValidationError
from .evaluation import (
    EvalReport,
    GenTask,
    McTask,
    ReportRow,
    TransformerHarness,
    eval_multiple_choice,
    generate_all,
    render_report,
    score_generations,
)
from .model import ModelConfig, SamplingParams, generate, init_model
from .numerics import RngState
from .templating import DEFAULT_SYSTEM_PROMPT, ChatMessage, format_alpaca, format_chat
from .tokenizer import EOT, train_bpe
from .training import (
    ADAPT_DEFAULTS,
    DPO_DEFAULTS,
    SFT_DEFAULTS,
    DpoConfig,
    TrainConfig,
    filter_preferences,
    run_adaptation,
    run_dpo,
    run_sft,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# Warm-up that stands in for a pretrained, instruction-following base.
PRETRAIN_DEFAULTS = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=16, loss_mask_mode="full_sequence")

# adaptation either keeps training the adapters or unfreezes merged dense weights
ADAPT_MODES = ("adapters", "full")

PATH_KEYS = (
    "sft",
    "warmup_sft",
    "preference",
    "raw_source",
    "raw_target",
    "heldout_source",
    "heldout_target",
    "tasks",
    "vocab",
    "checkpoints",
    "reports",
    "metrics",
)
DEFAULT_PATHS = {
    "sft": "sft.jsonl",
    "warmup_sft": "warmup_sft.jsonl",
    "preference": "preference.jsonl",
    "raw_source": "raw_source.jsonl",
    "raw_target": "raw_target.jsonl",
    "heldout_source": "heldout_source.jsonl",
    "heldout_target": "heldout_target.jsonl",
    "tasks": "tasks",
    "vocab": "vocab.json",
    "checkpoints": "checkpoints",
    "reports": "reports",
    "metrics": "metrics.jsonl",
}


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


def _only(obj: dict, allowed: Iterable[str], section: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {sorted(unknown)}")


def _train(obj: dict, base: TrainConfig, section: str, extra: Iterable[str] = ()) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)} - {"seed"}
    _only(obj, known | set(extra), section)
    return TrainConfig.from_dict({k: v for k, v in obj.items() if k in known}, base)


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    vocab_size: int = 1024
    model: dict = field(default_factory=dict)
    lora: LoraConfig = LoraConfig()
    quantize_base: bool = True
    block_size: int = 64
    pretrain: TrainConfig = PRETRAIN_DEFAULTS
    sft: TrainConfig = SFT_DEFAULTS
    dpo: TrainConfig = DPO_DEFAULTS
    dpo_beta: float = 0.1
    min_score: float | None = None
    excluded_sources: tuple[str, ...] = ()
    adapt: TrainConfig = ADAPT_DEFAULTS
    adapt_mode: str = "adapters"
    max_new_tokens: int = 16
    data: ToySizes = ToySizes()
    paths: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self) -> None:
        if self.adapt_mode not in ADAPT_MODES:
            raise ConfigError(f"adapt mode must be one of {ADAPT_MODES}, got {self.adapt_mode!r}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})

    def path(self, key: str) -> Path:
        p = Path(self.paths.get(key, DEFAULT_PATHS[key]))
        return p if p.is_absolute() else self.root / p

    def stage(self, name: str) -> TrainConfig:
        """Stage hyperparameters with the run seed applied."""
        return replace(getattr(self, name), seed=self.seed)

    @classmethod
    def from_dict(cls, obj: dict, root: Path = Path(".")) -> "AppConfig":
        _only(obj, ("seed", "tokenizer", "model", "lora", "qlora", "pretrain", "sft", "dpo", "adapt", "eval", "data", "paths"), "top level")
        tok = obj.get("tokenizer", {})
        _only(tok, ("vocab_size",), "tokenizer")
        model = obj.get("model", {})
        _only(model, {f.name for f in fields(ModelConfig)} - {"vocab_size"}, "model")
        lora = obj.get("lora", {})
        _only(lora, ("rank", "alpha", "targets", "dropout"), "lora")
        qlora = obj.get("qlora", {})
        _only(qlora, ("quantize_base", "block_size"), "qlora")
        dpo = obj.get("dpo", {})
        ev = obj.get("eval", {})
        _only(ev, ("max_new_tokens",), "eval")
        data = obj.get("data", {})
        _only(data, {f.name for f in fields(ToySizes)}, "data")
        paths = obj.get("paths", {})
        _only(paths, PATH_KEYS, "paths")
        seed = obj.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        try:
            return cls(
                seed=seed,
                vocab_size=int(tok.get("vocab_size", 1024)),
                model=dict(model),
                lora=LoraConfig(**{**lora, **({"targets": tuple(lora["targets"])} if "targets" in lora else {})}),
                quantize_base=bool(qlora.get("quantize_base", True)),
                block_size=int(qlora.get("block_size", 64)),
                pretrain=_train(obj.get("pretrain", {}), PRETRAIN_DEFAULTS, "pretrain"),
                sft=_train(obj.get("sft", {}), SFT_DEFAULTS, "sft"),
                dpo=_train(dpo, DPO_DEFAULTS, "dpo", ("beta", "min_score", "excluded_sources")),
                dpo_beta=float(dpo.get("beta", 0.1)),
                min_score=dpo.get("min_score"),
                excluded_sources=tuple(dpo.get("excluded_sources", ())),
                adapt=_train(obj.get("adapt", {}), ADAPT_DEFAULTS, "adapt", ("mode",)),
                adapt_mode=obj.get("adapt", {}).get("mode", "adapters"),
                max_new_tokens=int(ev.get("max_new_tokens", 16)),
                data=ToySizes(**data),
                paths=dict(paths),
                root=root,
            )
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        def train(cfg: TrainConfig) -> dict:
            d = cfg.to_dict()
            d.pop("seed")
            return d

        return {
            "seed": self.seed,
            "tokenizer": {"vocab_size": self.vocab_size},
            "model": dict(self.model),
            "lora": self.lora.to_dict(),
            "qlora": {"quantize_base": self.quantize_base, "block_size": self.block_size},
            "pretrain": train(self.pretrain),
            "sft": train(self.sft),
            "dpo": {**train(self.dpo), "beta": self.dpo_beta, "min_score": self.min_score, "excluded_sources": list(self.excluded_sources)},
            "adapt": {**train(self.adapt), "mode": self.adapt_mode},
            "eval": {"max_new_tokens": self.max_new_tokens},
            "data": asdict(self.data),
            "paths": {k: self.paths.get(k, DEFAULT_PATHS[k]) for k in PATH_KEYS},
        }

    @classmethod
    def load(cls, path: str | Path) -> "AppConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(obj, path.parent)

    def require_paths(self, *keys: str) -> None:
        missing = [f"{k}={self.path(k)}" for k in keys if not self.path(k).exists()]
        if missing:
            raise ConfigError("missing input paths: " + ", ".join(missing))


# --------------------------------------------------------------------------- #
# Metrics and checkpoints
# --------------------------------------------------------------------------- #


class MetricsLog:
    """Appends one JSON object per optimizer step."""

    KEYS = ("stage", "step", "loss", "lr", "margin")

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, entry: dict) -> None:
        row = {k: entry[k] for k in self.KEYS if k in entry}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _ckpt(cfg: AppConfig, name: str) -> Path:
    return cfg.path("checkpoints") / f"{name}.ckpt"


def _load(path: Path) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.vocab is None:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    return ckpt


def _adapted(ckpt: Checkpoint, cfg: AppConfig) -> AdaptedModel:
    if isinstance(ckpt.model, AdaptedModel):
        return ckpt.model
    return attach_lora(ckpt.model, cfg.lora, cfg.quantize_base, RngState(cfg.seed).child(), cfg.block_size)


def _stage_log(cfg: AppConfig, stage: str) -> Callable[[dict], None]:
    sink = MetricsLog(cfg.path("metrics"))

    def on_step(entry: dict) -> None:
        sink({**entry, "stage": stage})

    return on_step


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_make_toy_data(args, cfg: AppConfig) -> int:
    out = Path(args.out)
    make_toy_data(out, cfg.seed, cfg.data)
    config_path = out / "config.json"
    if not config_path.exists():
        body = AppConfig(seed=cfg.seed, data=cfg.data).to_dict()
        config_path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    print(f"wrote toy data and {config_path}")
    return EXIT_OK


def _training_text(cfg: AppConfig) -> list[str]:
    texts = [d.text for key in ("raw_source", "raw_target") for d in load_jsonl(cfg.path(key), "raw")]
    texts += [format_alpaca(r) for key in ("warmup_sft", "sft") for r in load_jsonl(cfg.path(key), "sft")]
    for p in load_jsonl(cfg.path("preference"), "preference"):
        prompt = p.prompt if isinstance(p.prompt, str) else " ".join(m.content for m in p.prompt)
        texts += [prompt, p.chosen, p.rejected]
    return texts


def cmd_init_tokenizer(args, cfg: AppConfig) -> int:
    """Train the vocabulary, initialise the model and run the pretraining warm-up."""
    cfg.require_paths("raw_source", "raw_target", "warmup_sft", "sft", "preference")
    vocab = train_bpe(_training_text(cfg), cfg.vocab_size)
    cfg.path("vocab").parent.mkdir(parents=True, exist_ok=True)
    vocab.save(cfg.path("vocab"))
    rng = RngState(cfg.seed)
    model = init_model(cfg.model_config(len(vocab)), rng).set_trainable(True)
    warmup = list(load_jsonl(cfg.path("raw_source"), "raw")) + list(load_jsonl(cfg.path("warmup_sft"), "sft"))
    result = run_sft(model, vocab, warmup, cfg.stage("pretrain"), on_step=_stage_log(cfg, "pretrain"))
    model.set_trainable(False)
    entry = stage_entry(
        "pretrain",
        [cfg.path("raw_source"), cfg.path("warmup_sft")],
        seed=cfg.seed,
        steps=result.steps,
        final_loss=result.epoch_losses[-1],
    )
    out = Path(args.out) if args.out else _ckpt(cfg, "base")
    save_checkpoint(Checkpoint(model, [entry], vocab), out)
    print(f"vocabulary of {len(vocab)} tokens; warm-up loss {result.epoch_losses[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train_sft(args, cfg: AppConfig) -> int:
    src = Path(args.checkpoint) if args.checkpoint else _ckpt(cfg, "base")
    cfg.require_paths("sft")
    ckpt = _load(src)
    records = load_jsonl(cfg.path("sft"), "sft")
    if not records:
        raise DataError(f"{cfg.path('sft')}: no SFT records")
    model = _adapted(ckpt, cfg)
    result = run_sft(model, ckpt.vocab, records, cfg.stage("sft"), on_step=_stage_log(cfg, "sft"))
    entry = stage_entry("sft", [cfg.path("sft")], seed=cfg.seed, steps=result.steps, final_loss=result.epoch_losses[-1])
    out = Path(args.out) if args.out else _ckpt(cfg, "sft")
    save_checkpoint(ckpt.appended(model, entry), out)
    print(f"sft: {result.steps} steps, final epoch loss {result.epoch_losses[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train_dpo(args, cfg: AppConfig) -> int:
    src = Path(args.checkpoint) if args.checkpoint else _ckpt(cfg, "sft")
    if not src.exists():
        raise OrderingError(f"train-dpo needs an SFT checkpoint; {src} does not exist (run train-sft first)")
    ckpt = _load(src)
    ckpt.require("sft", "train-dpo")
    cfg.require_paths("preference")
    records = filter_preferences(
        load_jsonl(cfg.path("preference"), "preference"),
        min_score=cfg.min_score if cfg.min_score is not None else float("-inf"),
        excluded_sources=cfg.excluded_sources,
    )
    model = _adapted(ckpt, cfg)
    reference = model.copy()
    result = run_dpo(model, reference, ckpt.vocab, records, cfg.stage("dpo"), DpoConfig(cfg.dpo_beta), on_step=_stage_log(cfg, "dpo"))
    entry = stage_entry(
        "dpo",
        [cfg.path("preference")],
        seed=cfg.seed,
        steps=result.steps,
        records=len(records),
        margin_before=result.extra["margin_before"],
        margin_after=result.extra["margin_after"],
    )
    out = Path(args.out) if args.out else _ckpt(cfg, "dpo")
    save_checkpoint(ckpt.appended(model, entry), out)
    print(f"dpo: {len(records)} pairs, mean margin {result.extra['margin_before']:.4f} -> {result.extra['margin_after']:.4f}; wrote {out}")
    return EXIT_OK


def cmd_adapt(args, cfg: AppConfig) -> int:
    if args.checkpoint:
        src = Path(args.checkpoint)
    else:
        src = _ckpt(cfg, "dpo") if _ckpt(cfg, "dpo").exists() else _ckpt(cfg, "sft")
    if not src.exists():
        raise OrderingError(f"adapt needs an SFT checkpoint; {src} does not exist (run train-sft first)")
    ckpt = _load(src)
    ckpt.require("sft", "adapt")
    cfg.require_paths("raw_target", "heldout_target", "heldout_source")
    corpus = load_jsonl(cfg.path("raw_target"), "raw")
    if cfg.adapt_mode == "full":
        dense = merge_lora(ckpt.model) if isinstance(ckpt.model, AdaptedModel) else ckpt.model.copy()
        model = dense.set_trainable(True)
    else:
        model = _adapted(ckpt, cfg)
    result = run_adaptation(
        model,
        ckpt.vocab,
        corpus,
        cfg.stage("adapt"),
        heldout=load_jsonl(cfg.path("heldout_target"), "raw"),
        source_heldout=load_jsonl(cfg.path("heldout_source"), "raw"),
        on_step=_stage_log(cfg, "adapt"),
    )
    if cfg.adapt_mode == "full":
        model.set_trainable(False)
    entry = stage_entry("adapt", [cfg.path("raw_target")], seed=cfg.seed, steps=result.steps, mode=cfg.adapt_mode, **result.extra)
    out = Path(args.out) if args.out else _ckpt(cfg, "adapt")
    save_checkpoint(ckpt.appended(model, entry), out)
    x = result.extra
    print(
        f"adapt: held-out target perplexity {x['perplexity_before']:.3f} -> {x['perplexity_after']:.3f}, "
        f"source {x['source_perplexity_before']:.3f} -> {x['source_perplexity_after']:.3f}; wrote {out}"
    )
    return EXIT_OK


def cmd_merge(args, cfg: AppConfig) -> int:
    src = Path(args.checkpoint) if args.checkpoint else _ckpt(cfg, "adapt")
    ckpt = _load(src)
    if not isinstance(ckpt.model, AdaptedModel):
        raise DataError(f"{src}: checkpoint has no adapters to merge")
    out = Path(args.out) if args.out else _ckpt(cfg, "merged")
    save_checkpoint(ckpt.appended(merge_lora(ckpt.model), {"stage": "merge"}), out)
    print(f"merged {len(ckpt.model.lora_a)} adapters; wrote {out}")
    return EXIT_OK


def _task_schema(path: Path) -> str:
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    keys = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:1: malformed JSON ({exc.msg})") from exc
                return "mc_task" if isinstance(keys, dict) and "choices" in keys else "gen_task"
    return "gen_task"


def evaluate_tasks(harness, tasks_dir: Path, sampling: SamplingParams, name: str) -> EvalReport:
    """Score every ``*.jsonl`` task under ``tasks_dir`` in file-name order."""
    files = sorted(tasks_dir.glob("*.jsonl"))
    if not files:
        raise DataError(f"{tasks_dir}: no task files (*.jsonl)")
    rows: list[ReportRow] = []
    errors: dict[str, int] = {}
    for path in files:
        task_name = path.stem
        schema = _task_schema(path)
        items = tuple(load_jsonl(path, schema))
        if schema == "mc_task":
            scores = eval_multiple_choice(harness, McTask(task_name, items))
            rows += [ReportRow(task_name, "acc", scores.acc), ReportRow(task_name, "acc_norm", scores.acc_norm)]
            failed = scores.errors
        else:
            task = GenTask(task_name, items)
            texts, failed = generate_all(harness, task, sampling)
            rows += [
                ReportRow(task_name, "exact_match,strict-match", score_generations(texts, task, "strict")),
                ReportRow(task_name, "exact_match,flexible-extract", score_generations(texts, task, "flexible")),
            ]
        if failed:
            errors[task_name] = failed
    return EvalReport(name, rows, errors)


def cmd_eval(args, cfg: AppConfig) -> int:
    src = Path(args.checkpoint) if args.checkpoint else _ckpt(cfg, "adapt")
    tasks = Path(args.tasks) if args.tasks else cfg.path("tasks")
    if not tasks.is_dir():
        raise ConfigError(f"{tasks}: tasks directory not found")
    ckpt = _load(src)
    harness = TransformerHarness(ckpt.model, ckpt.vocab)
    sampling = SamplingParams(max_new_tokens=cfg.max_new_tokens, seed=cfg.seed)
    report = evaluate_tasks(harness, tasks, sampling, args.name or src.stem)
    out = Path(args.out) if args.out else cfg.path("reports") / f"{src.stem}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(render_report([report]))
    return EXIT_OK


def cmd_report(args, cfg: AppConfig) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    text = render_report(reports)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Chat
# --------------------------------------------------------------------------- #


def _clean_reply(text: str) -> str:
    cut = text.find(EOT)
    return (text if cut < 0 else text[:cut]).strip()


def chat_repl(
    ckpt: Checkpoint,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    p: SamplingParams = SamplingParams(),
    read: Callable[[str], str] = input,
    out: TextIO = sys.stdout,
) -> list[ChatMessage]:
    """Read-generate-print loop; returns the final history.

    ``/reset`` clears the history and ``/quit`` (or end of input) leaves.
    When the formatted history no longer fits the context window the oldest
    exchanges are dropped and the user is told so.
    """
    vocab = ckpt.vocab
    if vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    model = ckpt.model
    eot = vocab.id_of(EOT)
    params = replace(p, stop_ids=p.stop_ids | {eot})
    system = [ChatMessage("system", system_prompt)] if system_prompt else []
    history: list[ChatMessage] = []
    while True:
        try:
            line = read("> ")
        except EOFError:
            break
        text = line.strip()
        if not text:
            continue
        if text == "/quit":
            break
        if text == "/reset":
            history = []
            print("(history cleared)", file=out)
            continue
        turn = history + [ChatMessage("user", text)]
        ids = vocab.encode(format_chat(system + turn))
        dropped = 0
        while len(ids) + 1 > model.config.max_seq_len and len(turn) > 1:
            turn = turn[2:]
            dropped += 1
            ids = vocab.encode(format_chat(system + turn))
        if len(ids) + 1 > model.config.max_seq_len:
            print("(message too long for the context window; not sent)", file=out)
            continue
        if dropped:
            print(f"(dropped {dropped} oldest exchange{'s' if dropped > 1 else ''} to fit the context window)", file=out)
        reply = _clean_reply(vocab.decode(generate(model, ids, params)))
        print(reply, file=out)
        history = turn + [ChatMessage("assistant", reply)]
    return history


def cmd_chat(args, cfg: AppConfig) -> int:
    src = Path(args.checkpoint) if args.checkpoint else _ckpt(cfg, "adapt")
    ckpt = _load(src)
    p = SamplingParams(temperature=args.temperature, top_p=args.top_p, max_new_tokens=args.max_new_tokens, seed=cfg.seed)
    chat_repl(ckpt, args.system if args.system is not None else DEFAULT_SYSTEM_PROMPT, p)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Dispatch
# --------------------------------------------------------------------------- #


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="langadapt", description="Desk-scale SFT, preference optimization and language adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def command(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(fn=fn)
        return p

    p = command("make-toy-data", cmd_make_toy_data, "write the synthetic datasets and a starter config")
    p.add_argument("--out", required=True)
    p = command("init-tokenizer", cmd_init_tokenizer, "train the vocabulary and warm up a base model")
    p.add_argument("--out")
    for name, fn, help_text in (
        ("train-sft", cmd_train_sft, "supervised fine-tuning with QLoRA adapters"),
        ("train-dpo", cmd_train_dpo, "preference optimization against a frozen reference"),
        ("adapt", cmd_adapt, "continued training on target-language raw text"),
        ("merge", cmd_merge, "fold adapters into dense weights"),
    ):
        p = command(name, fn, help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--out")
    p = command("eval", cmd_eval, "score a checkpoint on a directory of tasks")
    p.add_argument("--checkpoint")
    p.add_argument("--tasks")
    p.add_argument("--out")
    p.add_argument("--name", help="model name shown in reports")
    p = command("chat", cmd_chat, "interactive chat with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--system", help="system prompt (empty string for none)")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p = command("report", cmd_report, "render evaluation reports side by side")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        cfg = AppConfig.load(args.config) if args.config else AppConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = replace(cfg, seed=args.seed)
        return args.fn(args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LangAdaptError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())

