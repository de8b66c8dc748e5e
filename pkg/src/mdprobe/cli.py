"""Command-line entry point.

Verbs:

    ingest     validate a corpus (manifest, spans, optional annotations)
    synth      generate a synthetic corpus split
    train-pr   train a recognition probe on native speech
    train-md   train a detection probe on a labeled corpus (fixed epochs)
    crossval   cross-validated selection + final detection model (+ eval)
    score      score a labeled corpus with a checkpoint (probe or GOP)
    eval       compute metrics from a score file
    report     render a report JSON as a text table

Every verb takes `--config FILE` (JSON) plus trailing `key=value`
overrides with dotted paths (e.g. `train.lr=0.02`); values parse as JSON
when possible, else strings. Exit codes: 2 bad configuration, 3 bad or
missing data, 4 numerically undefined result.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from mdprobe import __version__
from mdprobe.annotate import PronLabel
from mdprobe.downstream import (
    TrainConfig,
    dataset_loss,
    gop_score,
    load_checkpoint,
    load_senone_map,
    phone_posteriors,
    save_checkpoint,
    train,
)
from mdprobe.errors import ConfigError, DataError, MdprobeError, NumericError
from mdprobe.metrics import (
    EvalReport,
    ScoredItem,
    ScoredSet,
    evaluate,
    load_thresholds,
    render_table,
    save_thresholds,
)
from mdprobe.phoneset import (
    Phone,
    PhoneInventory,
    load_default_inventory,
    load_inventory,
    load_scheme,
)
from mdprobe.protocol import (
    ProtocolConfig,
    load_corpus,
    load_folds,
    md_training_data,
    pr_training_data,
    run_md_experiment,
    run_md_selection,
    save_folds,
    score_utterances,
)
from mdprobe.synth import SynthSpec, gen_corpus

CONFIG_DIR_ENV = "MDPROBE_CONFIG_DIR"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# --- config plumbing ---


def parse_overrides(pairs: list[str]) -> dict:
    """`a.b.c=value` strings -> nested dict; values JSON-decoded if possible."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return out


def merge_config(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def _resolve_config_path(path: str) -> Path:
    """A bare config name falls back to $MDPROBE_CONFIG_DIR when the
    literal path does not exist."""
    p = Path(path)
    if p.exists():
        return p
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and not os.path.isabs(path):
        candidate = Path(env_dir) / path
        if candidate.exists():
            return candidate
    raise ConfigError(f"no such config file: {path}")


def load_config(path: str | None, overrides: list[str]) -> dict:
    doc: dict = {}
    if path:
        p = _resolve_config_path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return merge_config(doc, parse_overrides(overrides))


def provenance(doc: dict, seed: int | None = None) -> dict:
    """What every artifact records about its origin: tool version, seed,
    and a digest of the fully merged configuration."""
    digest = hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode("utf-8")
    ).hexdigest()
    out = {"tool": f"mdprobe {__version__}", "config_sha256": digest}
    if seed is not None:
        out["seed"] = seed
    return out


def _build(dc_type, section: dict, where: str):
    known = {f.name for f in fields(dc_type)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    try:
        return dc_type(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def train_config(doc: dict, **forced) -> TrainConfig:
    section = dict(doc.get("train", {}))
    section.update(forced)
    if "phones" in section:
        raise ConfigError("phones belong in the synth section")
    return _build(TrainConfig, section, "train")


def protocol_config(doc: dict) -> ProtocolConfig:
    return _build(ProtocolConfig, dict(doc.get("protocol", {})), "protocol")


def synth_spec(doc: dict, **forced) -> SynthSpec:
    section = dict(doc.get("synth", {}))
    section.update(forced)
    if "phones" not in section:
        raise ConfigError("synth.phones is required")
    section["phones"] = tuple(section["phones"])
    return _build(SynthSpec, section, "synth")


def _inventory(args):
    if getattr(args, "inventory", None):
        return load_inventory(args.inventory)
    return load_default_inventory()


def _scheme(args):
    name = getattr(args, "scheme", None)
    return load_scheme(name) if name else None


def _atomic_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    os.replace(tmp, path)


def _load_labeled_corpus(args, inventory):
    # --spans/--annotations may be omitted when the manifest names them
    corpus = load_corpus(args.manifest, args.spans, inventory,
                         annotations_path=args.annotations, scheme=_scheme(args))
    if any(u.labeled is None for u in corpus.utterances):
        raise ConfigError(
            "this verb needs pronunciation labels: pass --annotations or "
            "use a manifest that names an annotation file"
        )
    return corpus


# --- verbs ---


def cmd_ingest(args) -> int:
    inventory = _inventory(args)
    corpus = load_corpus(
        args.manifest, args.spans, inventory,
        annotations_path=args.annotations, scheme=_scheme(args),
        skip_unmappable=args.skip_unmappable,
    )
    n_inst = sum(len(u.instances) for u in corpus.utterances)
    n_frames = sum(u.features.shape[1] for u in corpus.utterances)
    print(f"corpus {corpus.name}: {len(corpus.utterances)} utterances, "
          f"{len(corpus.speakers)} speakers, {n_frames} frames, {n_inst} spans")
    if any(u.labeled is not None for u in corpus.utterances):
        counts = {label: 0 for label in PronLabel}
        for u in corpus.utterances:
            for it in u.labeled or ():
                counts[it.label] += 1
        print(f"labels: {counts[PronLabel.POSITIVE]} positive, "
              f"{counts[PronLabel.NEGATIVE]} negative, "
              f"{counts[PronLabel.IGNORED]} ignored")
    print("ok")
    return 0


def cmd_synth(args) -> int:
    doc = load_config(args.config, args.overrides)
    spec = synth_spec(doc)
    inventory = _inventory(args)
    paths = gen_corpus(spec, args.out, inventory, native=args.native,
                       name=args.name)
    print(f"wrote {paths.manifest}")
    return 0


def _write_loss_trace(out: str, trace: list[float], doc: dict, cfg,
                      dev_losses: list[float] | None = None) -> None:
    sidecar = Path(str(out) + ".loss.json")
    body = {
        "task": cfg.task,
        "epochs": len(trace),
        "train_loss": trace,
        "provenance": provenance(doc, cfg.seed),
    }
    if dev_losses is not None:
        body["dev_loss"] = dev_losses
    _atomic_json(sidecar, body)


def cmd_train_md(args) -> int:
    doc = load_config(args.config, args.overrides)
    cfg = train_config(doc, task="md")
    inventory = _inventory(args)
    corpus = _load_labeled_corpus(args, inventory)
    data = md_training_data(corpus.utterances, inventory, cfg.combine_mode)
    model, trace = train(data, cfg, len(inventory))
    save_checkpoint(args.out, model, inventory, cfg,
                    extra=provenance(doc, cfg.seed))
    _write_loss_trace(args.out, trace, doc, cfg)
    print(f"wrote {args.out}")
    return 0


def cmd_train_pr(args) -> int:
    doc = load_config(args.config, args.overrides)
    cfg = train_config(doc, task="pr")
    inventory = _inventory(args)
    corpus = load_corpus(args.manifest, args.spans, inventory)
    data = pr_training_data(corpus.utterances, inventory, cfg.combine_mode)
    best_epoch = cfg.epochs
    dev_losses: list[float] | None = None
    if args.dev_manifest:
        dev = load_corpus(args.dev_manifest, args.dev_spans, inventory)
        dev_data = pr_training_data(dev.utterances, inventory, cfg.combine_mode)
        losses: list[float] = []
        train(data, cfg, len(inventory),
              epoch_hook=lambda e, m: losses.append(dataset_loss(m, dev_data, "pr")))
        best_epoch = int(np.argmin(losses)) + 1
        dev_losses = losses
        cfg = replace(cfg, epochs=best_epoch)
    model, trace = train(data, cfg, len(inventory))
    save_checkpoint(args.out, model, inventory, cfg,
                    extra=provenance(doc, cfg.seed))
    _write_loss_trace(args.out, trace, doc, cfg, dev_losses)
    print(f"wrote {args.out} (epochs={best_epoch})")
    return 0


def cmd_crossval(args) -> int:
    doc = load_config(args.config, args.overrides)
    cfg = train_config(doc, task="md")
    proto = protocol_config(doc)
    if args.jobs is not None:
        proto = replace(proto, jobs=args.jobs)
    inventory = _inventory(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = load_folds(args.folds_file) if args.folds_file else None
    prov = provenance(doc, proto.seed)
    score_header = [f"{k}={v}" for k, v in sorted(prov.items())]

    dev = load_corpus(args.manifest, args.spans, inventory,
                      annotations_path=args.annotations, scheme=_scheme(args))
    ckpt = out / "model.ckpt"
    if args.test_manifest:
        test = load_corpus(args.test_manifest, args.test_spans, inventory,
                           annotations_path=args.test_annotations,
                           scheme=_scheme(args))
        # recorded by name, not path: reports stay byte-identical when
        # the same experiment runs in a different artifact directory
        result = run_md_experiment(dev, test, cfg, proto, inventory,
                                   plan=plan, checkpoint=ckpt.name)
        result.test_scores.save(out / "test_scores.tsv", score_header)
        result.report.save(out / "report.json")
        (out / "report.txt").write_text(render_table(result.report),
                                        encoding="utf-8")
    else:
        result = run_md_selection(dev, cfg, proto, inventory, plan=plan)

    _atomic_json(out / "crossval.json", {
        "best_epoch": result.best_epoch,
        "epoch_costs": result.epoch_costs,
        "final_train_loss": result.loss_trace,
        "train": asdict(cfg),
        "protocol": asdict(proto),
        "provenance": prov,
    })
    save_thresholds(result.thresholds, out / "thresholds.json")
    save_folds(result.plan, out / "folds.tsv")
    result.dev_scores.save(out / "dev_scores.tsv", score_header)
    save_checkpoint(ckpt, result.model, inventory,
                    replace(cfg, epochs=result.best_epoch), extra=prov)
    print(f"best epoch {result.best_epoch}; artifacts in {out}")
    return 0


def cmd_score(args) -> int:
    inventory = _inventory(args)
    header: dict = {}
    if args.checkpoint and not args.gop:
        model, header = load_checkpoint(args.checkpoint)
        # the checkpoint's recorded node order wins over the default
        # inventory, so scores can't silently use a reordered phone list
        if header.get("inventory") and not getattr(args, "inventory", None):
            inventory = PhoneInventory(
                Phone(s) for s in header["inventory"]
            )
    corpus = _load_labeled_corpus(args, inventory)
    comments = [f"tool=mdprobe {__version__}"]
    if args.gop:
        if not args.senone_map:
            raise ConfigError("--gop needs --senone-map")
        mapping = load_senone_map(args.senone_map, inventory)
        scored = ScoredSet()
        for u in corpus.utterances:
            if u.features.shape[0] != 1:
                raise DataError(
                    f"{u.utt_id}: GOP scoring wants single-layer posterior "
                    f"files, got {u.features.shape[0]} layers"
                )
            post = phone_posteriors(u.features[0], mapping, len(inventory))
            for item in u.labeled:
                if item.label is PronLabel.IGNORED:
                    continue
                inst = item.instance
                scored.add(ScoredItem(
                    utt_id=u.utt_id, phone=inst.phone.symbol,
                    start=inst.start_frame, end=inst.end_frame,
                    score=gop_score(post, inst, inventory),
                    label=1 if item.label is PronLabel.POSITIVE else 0,
                    speaker=u.speaker,
                ))
        comments.append("scorer=gop")
    else:
        if not args.checkpoint:
            raise ConfigError("need --checkpoint (or --gop with --senone-map)")
        scored = score_utterances(model, corpus.utterances, inventory)
        comments.append(f"checkpoint={args.checkpoint}")
        if header.get("extra", {}).get("config_sha256"):
            comments.append(f"config_sha256={header['extra']['config_sha256']}")
    scored.save(args.out, comments)
    print(f"wrote {args.out} ({len(scored)} scores)")
    return 0


def cmd_eval(args) -> int:
    scored = ScoredSet.load(args.scores)
    thresholds = load_thresholds(args.thresholds) if args.thresholds else None
    report = evaluate(
        scored,
        thresholds=thresholds,
        dataset=args.dataset,
        scorer=args.scorer,
        fn_weight=args.fn_weight,
        min_count=args.min_class_count,
        bootstrap=args.bootstrap,
        seed=args.seed,
        checkpoint=args.checkpoint,
        threshold_source=args.threshold_source,
    )
    report.save(args.out)
    print(render_table(report), end="")
    return 0


def cmd_report(args) -> int:
    report = EvalReport.load(args.report)
    print(render_table(report), end="")
    return 0


# --- parser ---


def _add_corpus_flags(p, annotations: str = "optional") -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--spans",
                   help="target phone span file (default: from the manifest)")
    if annotations != "none":
        p.add_argument("--annotations",
                       help="utt<TAB>targets<TAB>annotations file "
                            "(default: from the manifest)")
        p.add_argument("--scheme", help="annotation symbol scheme "
                                        "(timit, arpabet-ext, ipa)")


def _add_common(p) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--inventory", help="alternative phone inventory file")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="dotted config overrides")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mdprobe",
        description="Phone-level pronunciation scoring probes over "
                    "precomputed frame features.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="validate a corpus")
    _add_corpus_flags(p)
    p.add_argument("--skip-unmappable", action="store_true",
                   help="drop unmappable annotation symbols instead of failing")
    _add_common(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus split")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synth")
    p.add_argument("--native", action="store_true",
                   help="all instances correct; no correctness signal")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-md", help="train a detection probe")
    _add_corpus_flags(p, annotations="required")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)
    p.set_defaults(fn=cmd_train_md)

    p = sub.add_parser("train-pr", help="train a recognition probe")
    _add_corpus_flags(p, annotations="none")
    p.add_argument("--dev-manifest", help="native dev manifest for epoch choice")
    p.add_argument("--dev-spans")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)
    p.set_defaults(fn=cmd_train_pr)

    p = sub.add_parser("crossval",
                       help="fold-based selection, final model, optional eval")
    _add_corpus_flags(p, annotations="required")
    p.add_argument("--test-manifest")
    p.add_argument("--test-spans")
    p.add_argument("--test-annotations")
    p.add_argument("--folds-file",
                   help="reuse fold assignments (speaker<TAB>fold lines)")
    p.add_argument("--jobs", type=int, default=None,
                   help="fold-level worker threads (results identical)")
    p.add_argument("--out", required=True, help="artifact directory")
    _add_common(p)
    p.set_defaults(fn=cmd_crossval)

    p = sub.add_parser("score", help="score a labeled corpus")
    _add_corpus_flags(p, annotations="required")
    p.add_argument("--checkpoint", help="probe checkpoint")
    p.add_argument("--gop", action="store_true",
                   help="treat features as senone posteriors; GOP scoring")
    p.add_argument("--senone-map", help="senone->phone map file")
    p.add_argument("--out", required=True, help="score TSV path")
    _add_common(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="metrics from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--thresholds", help="phone->threshold JSON")
    p.add_argument("--dataset", default="")
    p.add_argument("--scorer", default="")
    p.add_argument("--checkpoint", default="",
                   help="checkpoint identifier recorded in the report")
    p.add_argument("--threshold-source", default="dev",
                   choices=("dev", "pooled-cv"),
                   help="where the thresholds were calibrated")
    p.add_argument("--fn-weight", type=float, default=2.0)
    p.add_argument("--min-class-count", type=int, default=50)
    p.add_argument("--bootstrap", type=int, default=0,
                   help="speaker bootstrap replicates (0 = off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render a report JSON")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_report)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MdprobeError as exc:  # base-class fallback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
