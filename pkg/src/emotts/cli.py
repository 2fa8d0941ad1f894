"""Command-line entry points.

Commands: gen-data, train, synth, eval, compare, metric-audit,
grad-check. Every command takes values from three layers with the
precedence CLI flag > config file > built-in default. The config file
is a flat ``key = value`` text file, pointed at by ``--config`` or the
EMOTTS_CONFIG environment variable. Outputs land in a run directory
(``--out-dir``, defaulting to ``runs/<timestamp>-seed<seed>``), and
every run directory gets a ``run.json`` recording the command, the seed
and the effective settings.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional, Sequence

from . import audit, dataset, decode, metrics, model as model_mod, train, vocab
from .toyspeech import EmotionCategory, phonemes_to_str

ENV_CONFIG = "EMOTTS_CONFIG"


def load_config_file(path: str) -> dict[str, str]:
    """Parse a flat key = value config file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config file and explicit CLI flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG)
    if config_path:
        file_values = load_config_file(config_path)
        for key, value in file_values.items():
            if key in merged:
                merged[key] = _coerce(value, defaults[key]) if defaults[key] is not None else value
    for key in defaults:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    return merged


def make_run_dir(out_dir: Optional[str], seed: int) -> str:
    if out_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out_dir = os.path.join("runs", f"{stamp}-seed{seed}")
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def write_run_meta(run_dir: str, command: str, settings: dict) -> None:
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, "settings": settings}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = {
    "kind": "pipeline",
    "per_emotion": 10,
    "wer_threshold": dataset.DEFAULT_WER_THRESHOLD,
    "rephrasings": 2,
    "test_per_emotion": 2,
    "val_per_emotion": 1,
    "tiny_utterances": 64,
    "seed": 0,
    "out_dir": None,
}


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    if cfg["kind"] == "pipeline":
        entries = dataset.run_pipeline(
            dataset.PipelineConfig(
                per_emotion=cfg["per_emotion"],
                wer_threshold=cfg["wer_threshold"],
                seed=cfg["seed"],
            )
        )
        entries = dataset.augment_descriptions(entries, k=cfg["rephrasings"])
        entries = dataset.split(
            entries,
            per_emotion_test=cfg["test_per_emotion"],
            per_emotion_val=cfg["val_per_emotion"],
            seed=cfg["seed"],
        )
    elif cfg["kind"] == "tiny":
        entries = dataset.tiny_corpus(cfg["tiny_utterances"], seed=cfg["seed"])
    elif cfg["kind"] == "hard-case":
        entries = dataset.hard_case_corpus(seed=cfg["seed"])
    else:
        raise ValueError(f"unknown corpus kind {cfg['kind']!r}")
    manifest_path = os.path.join(run_dir, "manifest.jsonl")
    dataset.write_manifest(entries, manifest_path)
    table = dataset.stats(entries)
    with open(os.path.join(run_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": cfg["seed"], "stats": table}, fh, indent=2)
        fh.write("\n")
    write_run_meta(run_dir, "gen-data", cfg)
    print(dataset.format_stats_table(table))
    print(f"manifest: {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "phase": "pretrain",
    "variant": "audio",
    "group_size": 3,
    "steps": 200,
    "warmup": 20,
    "peak_lr": None,
    "batch_size": 6,
    "d_model": 64,
    "n_layers": 2,
    "n_heads": 4,
    "ff_dim": 128,
    "max_seq_len": 512,
    "dtype": "float32",
    "seed": 0,
    "split": "all",
    "init_checkpoint": None,
    "checkpoint_interval": None,
    "manifest": None,
    "out_dir": None,
}


def _filter_split(entries, split: str):
    if split == "all":
        return entries
    kept = [e for e in entries if e.split == split]
    if not kept:
        raise ValueError(f"no entries with split {split!r}")
    return kept


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    if not cfg["manifest"]:
        raise ValueError("--manifest is required")
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    entries = _filter_split(dataset.read_manifest(cfg["manifest"]), cfg["split"])
    variant = model_mod.Variant.parse(cfg["variant"])

    if cfg["phase"] == "finetune":
        if not cfg["init_checkpoint"]:
            raise ValueError("finetune needs --init-checkpoint from the pretrain phase")
        net, _ = model_mod.load_checkpoint(cfg["init_checkpoint"])
        if net.variant != variant:
            raise ValueError(
                f"checkpoint variant {net.variant.name!r} does not match requested {variant.name!r}"
            )
    else:
        layout = vocab.default_layout(with_phonemes=variant.needs_phoneme_block)
        net = model_mod.SpeechLm(
            model_mod.ModelConfig(
                d_model=cfg["d_model"],
                n_layers=cfg["n_layers"],
                n_heads=cfg["n_heads"],
                feedforward_dim=cfg["ff_dim"],
                group_size=cfg["group_size"],
                variant=variant,
                layout=layout,
                max_seq_len=cfg["max_seq_len"],
                dtype=cfg["dtype"],
                seed=cfg["seed"],
            )
        )

    examples = train.build_examples(
        entries, net.variant, net.layout, net.config.group_size, cfg["phase"]
    )
    train_config = train.TrainConfig(
        phase=cfg["phase"],
        total_steps=cfg["steps"],
        peak_lr=cfg["peak_lr"],
        warmup_steps=cfg["warmup"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        checkpoint_interval=cfg["checkpoint_interval"],
        checkpoint_dir=run_dir,
        log_path=os.path.join(run_dir, "log.jsonl"),
    )
    log = train.fit(net, examples, train_config)
    ckpt_path = os.path.join(run_dir, f"{cfg['phase']}-{cfg['steps']}.ckpt")
    model_mod.save_checkpoint(net, ckpt_path, extra={"phase": cfg["phase"], "step": cfg["steps"]})
    write_run_meta(run_dir, "train", {k: v for k, v in cfg.items()})
    print(f"final loss: {log.final_loss:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# synth / eval / compare

SYNTH_DEFAULTS = {
    "checkpoint": None,
    "manifest": None,
    "split": "all",
    "phase": None,
    "max_steps": 256,
    "repetition_penalty": 1.2,
    "seed": 0,
    "out_dir": None,
}


def _synthesize(net, entries, phase: str, max_steps: int, penalty: float) -> list[dict]:
    config = decode.DecodeConfig(repetition_penalty=penalty, max_steps=max_steps)
    records = []
    for entry in entries:
        prompt = train.prompt_token_ids(entry.text, entry.description, phase, net.layout)
        result = decode.generate(net, prompt, config)
        rel_tokens = [net.layout.audio_rel(t) for t in result.audio_tokens]
        phonemes = None
        guidance_text = None
        if result.guidance_tokens is not None:
            if net.variant.guidance == "phoneme":
                rel = [t - net.layout.phoneme_offset for t in result.guidance_tokens]
                valid = [p for p in rel if 0 <= p < 27]
                phonemes = phonemes_to_str(valid)
            else:
                chars = [t for t in result.guidance_tokens if t < len(vocab.CHARSET)]
                guidance_text = vocab.decode_text(chars)
        records.append(
            {
                "id": entry.id,
                "text": entry.text,
                "emotion": entry.emotion.label,
                "audio_tokens": rel_tokens,
                "phonemes": phonemes,
                "guidance_text": guidance_text,
                "step_count": result.step_count,
                "stop_reason": result.stop_reason,
            }
        )
    return records


def _infer_phase(net, requested: Optional[str]) -> str:
    if requested:
        return requested
    return "finetune"


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve(args, SYNTH_DEFAULTS)
    if not cfg["checkpoint"] or not cfg["manifest"]:
        raise ValueError("--checkpoint and --manifest are required")
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    net, extra = model_mod.load_checkpoint(cfg["checkpoint"])
    entries = _filter_split(dataset.read_manifest(cfg["manifest"]), cfg["split"])
    phase = cfg["phase"] or extra.get("phase") or "finetune"
    records = _synthesize(net, entries, phase, cfg["max_steps"], cfg["repetition_penalty"])
    out_path = os.path.join(run_dir, "generated.jsonl")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record))
            fh.write("\n")
    write_run_meta(run_dir, "synth", cfg)
    print(f"generated: {out_path} ({len(records)} utterances)")
    return 0


EVAL_DEFAULTS = {
    "generated": None,
    "manifest": None,
    "split": "all",
    "seed": 0,
    "out_dir": None,
}


def _load_generated(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _eval_items(records: Sequence[dict], entries) -> list[metrics.EvalItem]:
    by_id = {e.id: e for e in entries}
    items = []
    for record in records:
        entry = by_id.get(record["id"])
        if entry is None:
            raise ValueError(f"generated id {record['id']!r} not present in the reference manifest")
        items.append(
            metrics.EvalItem(
                item_id=record["id"],
                reference_text=entry.text,
                reference_tokens=entry.audio_tokens,
                generated_tokens=record["audio_tokens"],
                emotion=EmotionCategory.from_name(record["emotion"]),
            )
        )
    return items


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve(args, EVAL_DEFAULTS)
    if not cfg["generated"] or not cfg["manifest"]:
        raise ValueError("--generated and --manifest are required")
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    entries = dataset.read_manifest(cfg["manifest"])
    records = _load_generated(cfg["generated"])
    report = metrics.evaluate_batch(_eval_items(records, entries), seed=cfg["seed"])
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    write_run_meta(run_dir, "eval", cfg)
    print(metrics.render_report_table([("model", report)]))
    print(f"report: {report_path}")
    return 0


COMPARE_DEFAULTS = {
    "manifest": None,
    "split": "all",
    "phase": None,
    "max_steps": 256,
    "repetition_penalty": 1.2,
    "seed": 0,
    "out_dir": None,
}


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = resolve(args, COMPARE_DEFAULTS)
    if not cfg["manifest"] or not args.checkpoints:
        raise ValueError("--manifest and at least one NAME=PATH checkpoint are required")
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    entries = _filter_split(dataset.read_manifest(cfg["manifest"]), cfg["split"])
    rows = []
    for spec_item in args.checkpoints:
        if "=" not in spec_item:
            raise ValueError(f"expected NAME=PATH, got {spec_item!r}")
        name, path = spec_item.split("=", 1)
        net, extra = model_mod.load_checkpoint(path)
        phase = cfg["phase"] or extra.get("phase") or "finetune"
        records = _synthesize(net, entries, phase, cfg["max_steps"], cfg["repetition_penalty"])
        report = metrics.evaluate_batch(_eval_items(records, entries), seed=cfg["seed"])
        rows.append((name, report))
        with open(os.path.join(run_dir, f"report-{name}.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    write_run_meta(run_dir, "compare", cfg)
    table = metrics.render_report_table(rows)
    with open(os.path.join(run_dir, "compare.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
        fh.write("\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# metric-audit / grad-check

AUDIT_DEFAULTS = {
    "seed": 0,
    "systems": 6,
    "items_per_system": 60,
    "bucket_size": 20,
    "out_dir": None,
}


def cmd_metric_audit(args: argparse.Namespace) -> int:
    cfg = resolve(args, AUDIT_DEFAULTS)
    run_dir = make_run_dir(cfg["out_dir"], cfg["seed"])
    items, table = audit.synthetic_audit_items(
        seed=cfg["seed"],
        n_systems=cfg["systems"],
        items_per_system=cfg["items_per_system"],
    )
    _, selected = audit.mos_and_balanced_select(table, cfg["bucket_size"])
    chosen = {i for i in selected}
    balanced_items = [item for item in items if item.item_id in chosen]
    report = audit.audit_metrics(balanced_items, seed=cfg["seed"])
    with open(os.path.join(run_dir, "audit.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    write_run_meta(run_dir, "metric-audit", cfg)
    print(report.render())
    return 0


GRADCHECK_DEFAULTS = {
    "variant": "audio",
    "epsilon": 1e-4,
    "tolerance": 1e-4,
    "max_coords": 0,
    "seed": 0,
    "group_size": 3,
    "out_dir": None,
}


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = resolve(args, GRADCHECK_DEFAULTS)
    variant = model_mod.Variant.parse(cfg["variant"])
    layout = vocab.default_layout(with_phonemes=variant.needs_phoneme_block)
    net = model_mod.SpeechLm(
        model_mod.ModelConfig(
            d_model=16,
            n_layers=2,
            n_heads=2,
            feedforward_dim=32,
            group_size=cfg["group_size"],
            variant=variant,
            layout=layout,
            max_seq_len=256,
            dtype="float64",
            seed=cfg["seed"],
        )
    )
    entries = dataset.tiny_corpus(2, seed=cfg["seed"], words_per_text=(1, 2))
    examples = train.build_examples(entries, variant, layout, cfg["group_size"], "pretrain")
    max_coords = cfg["max_coords"] or None
    report = train.grad_check(net, examples, epsilon=cfg["epsilon"], max_coords_per_tensor=max_coords)
    print(report.summary())
    ok = report.max_rel_err <= cfg["tolerance"]
    print("PASS" if ok else "FAIL", f"(tolerance {cfg['tolerance']:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emotts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("gen-data", help="build a manifest (pipeline, tiny or hard-case corpus)")
    add_common(p)
    p.add_argument("--kind", choices=["pipeline", "tiny", "hard-case"])
    p.add_argument("--per-emotion", dest="per_emotion", type=int)
    p.add_argument("--wer-threshold", dest="wer_threshold", type=float)
    p.add_argument("--rephrasings", type=int)
    p.add_argument("--test-per-emotion", dest="test_per_emotion", type=int)
    p.add_argument("--val-per-emotion", dest="val_per_emotion", type=int)
    p.add_argument("--tiny-utterances", dest="tiny_utterances", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one phase of one variant")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--phase", choices=["pretrain", "finetune"])
    p.add_argument("--variant")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--ff-dim", dest="ff_dim", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--split")
    p.add_argument("--init-checkpoint", dest="init_checkpoint")
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate utterances for a manifest")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--phase", choices=["pretrain", "finetune"])
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--repetition-penalty", dest="repetition_penalty", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score generated utterances against a manifest")
    add_common(p)
    p.add_argument("--generated")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="synthesize and score several checkpoints")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--phase", choices=["pretrain", "finetune"])
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--repetition-penalty", dest="repetition_penalty", type=float)
    p.add_argument("checkpoints", nargs="*", metavar="NAME=PATH")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metric-audit", help="audit metric/judge agreement on a synthetic pool")
    add_common(p)
    p.add_argument("--systems", type=int)
    p.add_argument("--items-per-system", dest="items_per_system", type=int)
    p.add_argument("--bucket-size", dest="bucket_size", type=int)
    p.set_defaults(func=cmd_metric_audit)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    add_common(p)
    p.add_argument("--variant")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-coords", dest="max_coords", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
