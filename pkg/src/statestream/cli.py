"""Command-line entry point: ``statestream <subcommand> ...``.

Exit codes are 0 on success, 1 on a domain error (bad data, failed training,
unreachable judge) and 2 on configuration or I/O problems.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bench import (
    GroundingItem,
    ScoreReport,
    TsqaItem,
    WinRateTask,
    content_match,
    grounding_scores,
    tsqa_score,
    win_rate,
)
from .config import ToolkitConfig, load_config
from .dialogue import SCHEMA_VERSION, TaskKind, TimeInterval, build_dialogue
from .engine import replay
from .errors import ConfigError, DomainError, MissingRuns, SchemaViolation
from .judge import make_client
from .loss import LossConfig
from .synth import (
    SyntheticConfig,
    generate_corpus,
    load_corpus,
    manifest_path_for,
    synthetic_vocabulary,
    write_corpus,
)
from .toy_model import (
    OptimizerConfig,
    ToyModelConfig,
    evaluate_states,
    load_checkpoint,
    read_curve,
    save_checkpoint,
    split_corpus,
    train,
    write_curve,
)

logger = logging.getLogger("statestream")

LOSS_ORDER = ("focal", "fixed_scale", "plain_ce")
ABLATION_MARGIN = 0.10


def _write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------
# build-data


def _synth_config(cfg: ToolkitConfig) -> SyntheticConfig:
    s = dict(cfg["synth"])
    s.pop("num_episodes")
    return SyntheticConfig(**s)


def _dialogue_from_annotation(record: dict, lineno: int):
    try:
        events = [(TimeInterval(e["start"], e["end"]), e["text"]) for e in record["events"]]
        questions = [(q["text"], int(q["turn"])) for q in record.get("questions", [])]
        return build_dialogue(
            float(record["duration_s"]),
            float(record.get("granularity_s", 1.0)),
            events,
            record.get("task", TaskKind.EVENT_CAPTION.value),
            questions or None,
            frames=record.get("frames"),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(f"line {lineno}", f"malformed annotation record: {exc!r}") from None


def cmd_build_data(args: argparse.Namespace, cfg: ToolkitConfig) -> int:
    if args.annotations:
        dialogues = []
        with open(args.annotations, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaViolation(f"line {lineno}", f"invalid JSON: {exc.msg}") from None
                dialogues.append(_dialogue_from_annotation(record, lineno))
        manifest = write_corpus(
            dialogues,
            args.out,
            extra={"source": str(args.annotations), "config": cfg.to_dict(), "schema_version": SCHEMA_VERSION},
        )
    else:
        synth = _synth_config(cfg)
        manifest = generate_corpus(synth, cfg["synth"]["num_episodes"], args.out)
        manifest["config"] = cfg.to_dict()
        manifest["schema_version"] = SCHEMA_VERSION
        _write_text(manifest_path_for(args.out), _dump(manifest))
    counts = manifest["counts"]
    print(
        f"wrote {manifest['episodes']} dialogues to {args.out} "
        f"(silence={counts['silence']} standby={counts['standby']} response={counts['response']})"
    )
    return 0


# --------------------------------------------------------------------------
# train


def _model_config(cfg: ToolkitConfig, vocab_size: int, seed: int) -> ToyModelConfig:
    m = cfg["model"]
    opt = OptimizerConfig(
        learning_rate=float(m["learning_rate"]),
        steps=int(m["steps"]),
        batch_size=int(m["batch_size"]),
        seed=seed,
        name=m["optimizer"],
        eval_every=int(m["eval_every"]),
    )
    return ToyModelConfig(
        vocab_size=vocab_size,
        embed_dim=m["embed_dim"],
        context_window=m["context_window"],
        turn_tokens=m["turn_tokens"],
        num_layers=m["num_layers"],
        hidden_dim=m["hidden_dim"],
        optimizer=opt,
    )


def _loss_config(cfg: ToolkitConfig, state_ids) -> LossConfig:
    loss = cfg["loss"]
    weights = loss["fixed_weights"] if loss["mode"] == "fixed_scale" else None
    gamma = loss["gamma"]
    if isinstance(gamma, bool) or not isinstance(gamma, (int, float)):
        raise ConfigError(f"loss.gamma must be a number, got {gamma!r}")
    return LossConfig(tuple(state_ids), gamma=gamma, mode=loss["mode"], fixed_weights=weights)


def _artifact_paths(checkpoint: Path) -> tuple[Path, Path]:
    stem = checkpoint.name[: -len(".json")] if checkpoint.name.endswith(".json") else checkpoint.name
    return checkpoint.with_name(stem + ".curve.csv"), checkpoint.with_name(stem + ".run.json")


def _corpus_vocabulary(corpus_path: str, cfg: ToolkitConfig):
    """Vocabulary of the generator that wrote the corpus, else of the config."""
    manifest = manifest_path_for(corpus_path)
    if manifest.exists():
        record = json.loads(manifest.read_text(encoding="utf-8"))
        if "synth_config" in record:
            return synthetic_vocabulary(SyntheticConfig(**record["synth_config"]))
    return synthetic_vocabulary(_synth_config(cfg))


def _train_one(cfg_dict: dict, corpus_path: str, seed: int, checkpoint: str) -> dict:
    """Train one seed and write checkpoint, curve and run summary."""
    cfg = ToolkitConfig(cfg_dict)
    logging.getLogger("statestream").setLevel(logging.ERROR)
    dialogues = load_corpus(corpus_path)
    vocab = _corpus_vocabulary(corpus_path, cfg)
    train_set, heldout = split_corpus(dialogues, cfg["model"]["holdout_fraction"])
    model_cfg = _model_config(cfg, vocab.size, seed)
    loss_cfg = _loss_config(cfg, vocab.state_ids)
    model, curve = train(model_cfg, train_set, loss_cfg, vocab, heldout=heldout)
    ckpt = Path(checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    curve_path, run_path = _artifact_paths(ckpt)
    write_curve(curve, curve_path)
    report = evaluate_states(model, heldout, tolerance=int(cfg["engine"]["tolerance"])) if heldout else None
    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": loss_cfg.mode,
        "gamma": loss_cfg.gamma,
        "seed": seed,
        "checkpoint": ckpt.name,
        "final_loss": curve[-1].loss,
        "heldout": report.as_dict() if report is not None else None,
        "config": cfg.to_dict(),
    }
    _write_text(run_path, _dump(summary))
    return summary


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


def cmd_train(args: argparse.Namespace, cfg: ToolkitConfig) -> int:
    seeds = _parse_seeds(args.seeds) if args.seeds else [int(cfg["model"]["seed"])]
    if args.out and len(seeds) > 1:
        raise ConfigError("--out takes a single seed; use --out-dir for several")
    if not args.out and not args.out_dir:
        raise ConfigError("one of --out or --out-dir is required")
    if not Path(args.corpus).exists():
        raise ConfigError(f"corpus file {args.corpus} does not exist")
    # validate before fanning out
    _loss_config(cfg, (0, 1, 2))
    mode = cfg["loss"]["mode"]
    jobs = []
    for seed in seeds:
        target = args.out or str(Path(args.out_dir) / f"{mode}-seed{seed}.ckpt.json")
        jobs.append((cfg.to_dict(), str(args.corpus), seed, target))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_train_one, *zip(*jobs)))
    else:
        summaries = [_train_one(*job) for job in jobs]
    for s, job in zip(summaries, jobs):
        rec = s["heldout"]["response_recall"] if s["heldout"] else float("nan")
        print(f"{job[3]}: mode={s['mode']} seed={s['seed']} loss={s['final_loss']:.4f} response_recall={rec:.3f}")
    return 0


# --------------------------------------------------------------------------
# infer


def cmd_infer(args: argparse.Namespace, cfg: ToolkitConfig) -> int:
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    model = load_checkpoint(args.checkpoint)
    dialogues = load_corpus(args.dialogues)
    engine = cfg["engine"]
    lines = []
    for index, dialogue in enumerate(dialogues):
        result = replay(
            model,
            dialogue,
            tolerance=int(engine["tolerance"]),
            max_context_tokens=engine["max_context_tokens"],
            overflow=engine["overflow"],
        )
        for decision in result.decisions:
            record = {"dialogue": index, **decision.as_record()}
            lines.append(json.dumps(record, sort_keys=True, ensure_ascii=False))
    _write_text(args.out, "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} decisions for {len(dialogues)} dialogue(s) to {args.out}")
    return 0


# --------------------------------------------------------------------------
# eval

GOLD_TASKS = ("grounding", "tsqa", "narration", "dense_caption")


def _read_jsonl(path: str | os.PathLike) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno}", f"invalid JSON: {exc.msg}") from None
            if not isinstance(record, dict):
                raise SchemaViolation(f"{path}:{lineno}", "record must be an object")
            for key in ("video_id", "task", "payload"):
                if key not in record:
                    raise SchemaViolation(f"{path}:{lineno}.{key}", "missing field")
            if record["task"] not in GOLD_TASKS:
                raise SchemaViolation(f"{path}:{lineno}.task", f"unknown task {record['task']!r}")
            out.append((lineno, record))
    return out


def _key(record: dict) -> tuple[str, str, str]:
    return (str(record["video_id"]), record["task"], str(record.get("query", "")))


def _interval(payload, where: str) -> TimeInterval:
    try:
        start, end = payload
        return TimeInterval(float(start), float(end))
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(where, f"expected a [start, end] interval: {exc}") from None


def _answers(payload, where: str) -> tuple[tuple[str, float], ...]:
    try:
        return tuple((str(v), float(t)) for v, t in payload)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(where, f"expected a list of [answer, time] pairs: {exc}") from None


def evaluate_files(pred_path, gold_path, cfg: ToolkitConfig) -> ScoreReport:
    gold = _read_jsonl(gold_path)
    preds: dict[tuple[str, str, str], tuple[int, dict]] = {}
    for lineno, record in _read_jsonl(pred_path):
        preds[_key(record)] = (lineno, record)

    ev = cfg["eval"]
    jcfg = cfg["judge"]
    judge = None

    def client():
        nonlocal judge
        if judge is None:
            judge = make_client(
                jcfg["mode"],
                endpoint=jcfg["endpoint"],
                model=jcfg["model"],
                path=jcfg["path"],
                api_key_env=jcfg["api_key_env"],
                fixtures_dir=jcfg["fixtures_dir"],
                seed=int(jcfg["seed"]),
            )
        return judge

    grounding, tsqa = [], []
    captions: dict[str, list[WinRateTask | None]] = {"narration": [], "dense_caption": []}
    for lineno, record in gold:
        where = f"{gold_path}:{lineno}.payload"
        hit = preds.get(_key(record))
        pwhere = f"{pred_path}:{hit[0]}.payload" if hit else ""
        task = record["task"]
        if task == "grounding":
            direction = record.get("direction")
            if direction not in ("forward", "backward"):
                raise SchemaViolation(f"{gold_path}:{lineno}.direction", "must be forward or backward")
            pred = _interval(hit[1]["payload"], pwhere) if hit and hit[1]["payload"] is not None else None
            grounding.append(GroundingItem(str(record.get("query", "")), direction, _interval(record["payload"], where), pred))
        elif task == "tsqa":
            pred_answers = _answers(hit[1]["payload"], pwhere) if hit else ()
            tsqa.append(TsqaItem(str(record.get("query", "")), _answers(record["payload"], where), pred_answers))
        else:
            if hit is None or not str(hit[1]["payload"]).strip():
                captions[task].append(None)
            else:
                captions[task].append(
                    WinRateTask(str(record["video_id"]), task, str(hit[1]["payload"]), str(record["payload"]))
                )

    report = ScoreReport(delta_t=float(ev["delta_t"]))
    if grounding:
        report.grounding = grounding_scores(grounding)
    if tsqa:
        if ev["content_judge"]:
            match = lambda p, g: content_match(p, g, client())  # noqa: E731
        else:
            match = content_match
        report.tsqa = tsqa_score(tsqa, float(ev["delta_t"]), match)
    for task, key in (("narration", "narration_winrate"), ("dense_caption", "dense_winrate")):
        items = captions[task]
        if not items:
            continue
        present = [t for t in items if t is not None]
        won = 0.0
        if present:
            won = win_rate(present, client(), swap=bool(ev["swap"]), max_in_flight=int(jcfg["max_in_flight"])) * len(present)
        report.caption[key] = won / len(items)
    return report


def cmd_eval(args: argparse.Namespace, cfg: ToolkitConfig) -> int:
    report = evaluate_files(args.predictions, args.gold, cfg)
    if args.out:
        _write_text(args.out, report.to_json())
    if args.table:
        _write_text(args.table, report.to_table())
    sys.stdout.write(report.to_table())
    return 0


# --------------------------------------------------------------------------
# report


def _collect_runs(run_dir: Path) -> list[dict]:
    if not run_dir.is_dir():
        raise MissingRuns(f"run directory {run_dir} does not exist")
    runs = []
    for path in sorted(run_dir.rglob("*.run.json")):
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaViolation(str(path), f"invalid JSON: {exc.msg}") from None
        curve_path = path.with_name(path.name[: -len(".run.json")] + ".curve.csv")
        record["curve_points"] = len(read_curve(curve_path)) if curve_path.exists() else 0
        record["_path"] = str(path.relative_to(run_dir))
        runs.append(record)
    if not runs:
        raise MissingRuns(f"no *.run.json files under {run_dir}")
    return runs


def _response_recall(run: dict) -> float:
    held = run.get("heldout")
    return float(held["response_recall"]) if held else float("nan")


def ablation_verdict(medians: dict[str, float], margin: float = ABLATION_MARGIN) -> str:
    if not all(m in medians for m in LOSS_ORDER):
        missing = ", ".join(m for m in LOSS_ORDER if m not in medians)
        return f"incomplete: no runs for {missing}"
    f, s, p = (medians[m] for m in LOSS_ORDER)
    ok = f > s > p and f - p >= margin
    return (
        f"{'PASS' if ok else 'FAIL'}: focal {f:.3f} > fixed_scale {s:.3f} > plain_ce {p:.3f}, "
        f"focal - plain_ce = {f - p:.3f} (needs >= {margin:.2f})"
    )


def build_report(run_dir: str | os.PathLike) -> tuple[str, str]:
    """Markdown and CSV summaries of the training runs under ``run_dir``."""
    runs = _collect_runs(Path(run_dir))
    by_mode: dict[str, list[dict]] = {}
    for run in runs:
        by_mode.setdefault(run["mode"], []).append(run)
    order = [m for m in LOSS_ORDER if m in by_mode] + sorted(set(by_mode) - set(LOSS_ORDER))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "seed", "final_loss", "response_recall", "standby_recall", "silence_recall", "timing_f1"])
    for run in sorted(runs, key=lambda r: (order.index(r["mode"]), r["seed"])):
        held = run.get("heldout") or {}
        writer.writerow([
            run["mode"], run["seed"], f"{run['final_loss']:.6f}",
            f"{held.get('response_recall', float('nan')):.4f}",
            f"{held.get('standby_recall', float('nan')):.4f}",
            f"{held.get('silence_recall', float('nan')):.4f}",
            f"{held.get('timing_f1', float('nan')):.4f}",
        ])

    medians = {}
    lines = [
        "| loss | runs | median Response recall | mean Response recall | median final loss |",
        "|---|---|---|---|---|",
    ]
    for mode in order:
        recalls = [_response_recall(r) for r in by_mode[mode]]
        losses = [r["final_loss"] for r in by_mode[mode]]
        medians[mode] = statistics.median(recalls)
        lines.append(
            f"| {mode} | {len(recalls)} | {medians[mode]:.3f} | {statistics.fmean(recalls):.3f} "
            f"| {statistics.median(losses):.4f} |"
        )
    lines += ["", f"Ablation ordering: {ablation_verdict(medians)}", ""]
    return "\n".join(lines), buf.getvalue()


def cmd_report(args: argparse.Namespace, cfg: ToolkitConfig) -> int:
    markdown, table = build_report(args.runs)
    if args.out_md:
        _write_text(args.out_md, markdown)
    if args.out_csv:
        _write_text(args.out_csv, table)
    sys.stdout.write(markdown)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statestream", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="generate a synthetic corpus or assemble one from annotations")
    p.add_argument("--out", required=True, help="output JSONL path (manifest written alongside)")
    p.add_argument("--annotations", help="JSONL file of gold event spans; skips synthesis")
    p.add_argument("--episodes", type=int, dest="synth__num_episodes")
    p.add_argument("--seed", type=int, dest="synth__seed")
    p.add_argument("--turns", type=int, dest="synth__num_turns")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train the toy model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="checkpoint path for a single seed")
    p.add_argument("--out-dir", help="directory for one checkpoint per seed")
    p.add_argument("--seeds", help="comma list or range of seeds, e.g. 0-4")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes over seeds")
    p.add_argument("--loss", choices=("plain_ce", "fixed_scale", "focal"), dest="loss__mode")
    p.add_argument("--gamma", type=float, dest="loss__gamma")
    p.add_argument("--seed", type=int, dest="model__seed")
    p.add_argument("--steps", type=int, dest="model__steps")
    p.add_argument("--lr", type=float, dest="model__learning_rate")
    p.add_argument("--optimizer", choices=("sgd", "adam"), dest="model__optimizer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="stream dialogues through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dialogues", required=True, help="JSONL dialogues")
    p.add_argument("--out", required=True, help="JSONL emission log")
    p.add_argument("--max-context", type=int, dest="engine__max_context_tokens")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score benchmark predictions against gold")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--delta-t", type=float, dest="eval__delta_t", help="TSQA time tolerance in seconds (default 3)")
    p.add_argument("--judge", dest="judge__mode", help="judge mode: mock-always-a, mock-coinflip, fixture, http, ...")
    p.add_argument("--judge-fixtures", dest="judge__fixtures_dir")
    p.add_argument("--jobs", type=int, dest="judge__max_in_flight", help="concurrent judge requests")
    p.add_argument("--out", help="ScoreReport JSON path")
    p.add_argument("--table", help="markdown table path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare loss modes across training runs")
    p.add_argument("--runs", required=True, help="directory holding *.run.json files")
    p.add_argument("--out-md")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_report)
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for name, value in vars(args).items():
        if "__" in name and value is not None:
            section, key = name.split("__", 1)
            out.setdefault(section, {})[key] = value
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, flags=_flag_overrides(args))
        if getattr(args, "jobs", None) is not None and args.command == "train" and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args, cfg)
    except DomainError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
