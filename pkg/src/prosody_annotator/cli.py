"""Command-line entry point: corpus generation, pre-training, training, annotation and evaluation.

Every subcommand writes into a run directory laid out as ``corpus/``,
``checkpoints/``, ``logs/`` and ``reports/``, echoes its resolved
configuration to ``config.txt`` and records a ``manifest.json`` entry with
the seed and SHA-256 hashes of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from .core import Corpus, ProsodyError, read_corpus, write_corpus
from .encoders import ModelConfig, PRESETS
from .evaluation import (
    ReportRow,
    align,
    confusion,
    kappa_csv,
    read_annotations,
    report,
    sample_disagreements,
    write_annotations,
)
from .fusion import ProsodyAnnotator, annotate_batch
from .nn import load_checkpoint, load_into, module_bytes
from .pretrain import PretrainConfig, new_encoder, pretrain
from .synth import GenConfig, generate_corpus
from .training import (
    MODEL_NAMES,
    GridCell,
    TrainConfig,
    evaluate,
    history_csv,
    model_config_for,
    train,
)

log = logging.getLogger("prosody_annotator")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class ConfigError(ProsodyError, ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    at_least: bool = False  # binarize kappa as label >= level instead of label == level
    n: int = 300
    seed: int = 0
    id: str = "1"
    model: str = "-"


NAMESPACES = {"gen": GenConfig, "model": ModelConfig, "pretrain": PretrainConfig,
              "train": TrainConfig, "eval": EvalConfig}
# derived from the corpus, never configured
_DERIVED = {"model.vocab_size", "model.phone_count", "model.feature_dim"}


# ---------------------------------------------------------------------------
# configuration

def _field(key: str) -> dataclasses.Field:
    ns, _, name = key.partition(".")
    cls = NAMESPACES.get(ns)
    if cls is None or not name:
        raise ConfigError(f"unknown configuration key {key!r} (namespaces: {', '.join(NAMESPACES)})")
    for f in dataclasses.fields(cls):
        if f.name == name and key not in _DERIVED:
            return f
    raise ConfigError(f"unknown configuration key {key!r}")


def _coerce(key: str, raw: str):
    f = _field(key)
    default = f.default
    text = raw.strip()
    hint = str(f.type)
    try:
        if text.lower() == "none" and "None" in hint:
            return None
        if isinstance(default, bool) or hint == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(","))
        if isinstance(default, float) or hint == "float":
            return float(text)
        if isinstance(default, int) or hint.startswith("int"):
            return int(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


class RunConfig:
    """Flat namespaced settings: config file first, then command-line overrides."""

    def __init__(self, values: dict | None = None, source: str | None = None):
        self.values = dict(values or {})
        self.source = source

    @classmethod
    def load(cls, path: str | None, overrides: list[str]) -> "RunConfig":
        values = {}
        if path:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), path))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            values[key.strip()] = _coerce(key.strip(), value)
        return cls(values, path)

    def set(self, key: str, value) -> None:
        _field(key)
        self.values[key] = value

    def section(self, ns: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(ns + ".")}

    def build(self, ns: str, **extra):
        try:
            return NAMESPACES[ns](**{**self.section(ns), **extra})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _echo(obj, ns: str) -> list[str]:
    skip = {f.split(".", 1)[1] for f in _DERIVED if f.startswith(ns + ".")}
    return [f"{ns}.{k} = {_render(v)}" for k, v in dataclasses.asdict(obj).items() if k not in skip]


# ---------------------------------------------------------------------------
# run directory bookkeeping

def _sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    def __init__(self, root: str, rc: RunConfig | None = None):
        self.root = Path(root)
        self.config_file = rc.source if rc is not None else None
        for sub in ("corpus", "checkpoints", "logs", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []

    def path(self, sub: str, name: str) -> Path:
        p = self.root / sub / name
        self.outputs.append(p)
        return p

    def finish(self, command: str, seed, config_lines: list[str], inputs: list[str]) -> None:
        (self.root / "config.txt").write_text("\n".join(config_lines) + "\n", encoding="utf-8")
        manifest_path = self.root / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        manifest[command] = {
            "seed": seed,
            "config": config_lines,
            "config_file": self.config_file,
            "inputs": {str(p): _sha(Path(p)) for p in inputs + ([self.config_file] if self.config_file else [])},
            "outputs": {str(p.relative_to(self.root)): _sha(p) for p in self.outputs},
        }
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _threads() -> int:
    raw = os.environ.get("PROSODY_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PROSODY_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _read(path: str) -> Corpus:
    c = read_corpus(path)
    c.validate()
    return c


def _model_cfg(corpus: Corpus, rc: RunConfig, preset_name: str) -> ModelConfig:
    try:
        return model_config_for(corpus, preset_name, **rc.section("model"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _save_model(model: ProsodyAnnotator, config: TrainConfig, path: Path) -> Path:
    path.write_bytes(module_bytes(model))
    meta = path.with_suffix(".json")
    meta.write_text(json.dumps({"audio_encoder": config.audio_encoder, "seed": config.seed,
                                "model": dataclasses.asdict(model.cfg)}, sort_keys=True) + "\n")
    return meta


def load_model(path: str) -> ProsodyAnnotator:
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    model = ProsodyAnnotator(ModelConfig(**meta["model"]), meta["audio_encoder"], meta["seed"])
    load_into(model, load_checkpoint(path))
    return model


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args, rc: RunConfig) -> int:
    if args.seed is not None:
        rc.set("gen.seed", args.seed)
    cfg = rc.build("gen")
    run = RunDir(args.out, rc)
    split = generate_corpus(cfg)
    for name, corpus in split.items():
        write_corpus(corpus, run.path("corpus", f"{name}.jsonl"))
    run.finish("gen", cfg.seed, _echo(cfg, "gen"), [])
    print(f"wrote {len(split.train)}/{len(split.dev)}/{len(split.test)} train/dev/test utterances to {run.root / 'corpus'}")
    return EXIT_OK


def cmd_pretrain(args, rc: RunConfig) -> int:
    if args.seed is not None:
        rc.set("pretrain.seed", args.seed)
    if args.encoder:
        rc.set("pretrain.encoder", args.encoder)
    cfg = rc.build("pretrain")
    if cfg.encoder not in ("ppg", "conformer_char", "cnn_char"):
        raise ConfigError(f"cannot pre-train encoder {cfg.encoder!r}")
    corpus = _read(args.corpus)
    mcfg = _model_cfg(corpus, rc, args.preset)
    run = RunDir(args.out, rc)
    encoder = new_encoder(mcfg, cfg.encoder, cfg.seed)
    history = pretrain(encoder, corpus, cfg)
    ckpt = run.path("checkpoints", f"pretrain_{cfg.encoder}.ckpt")
    ckpt.write_bytes(module_bytes(encoder))
    run.path("logs", f"pretrain_{cfg.encoder}.csv").write_text(history_csv(history))
    run.finish(f"pretrain_{cfg.encoder}", cfg.seed, _echo(cfg, "pretrain") + _echo(mcfg, "model"), [args.corpus])
    print(f"final loss {history[-1]['loss']:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _train_config(args, rc: RunConfig) -> TrainConfig:
    if args.seed is not None:
        rc.set("train.seed", args.seed)
    if getattr(args, "encoder", None):
        rc.set("train.audio_encoder", args.encoder)
    if getattr(args, "pretrained", None):
        rc.set("train.pretrained", True)
        rc.set("train.pretrained_path", args.pretrained)
    return rc.build("train", preset=args.preset)


def cmd_train(args, rc: RunConfig) -> int:
    cfg = _train_config(args, rc)
    train_set, dev_set = _read(args.train), _read(args.dev)
    mcfg = _model_cfg(train_set, rc, cfg.preset)
    run = RunDir(args.out, rc)
    res = train(train_set, dev_set, cfg, mcfg)
    ckpt = run.path("checkpoints", "model.ckpt")
    run.outputs.append(_save_model(res.model, cfg, ckpt))
    run.path("logs", "train.csv").write_text(res.log_csv())
    inputs = [args.train, args.dev] + ([cfg.pretrained_path] if cfg.pretrained else [])
    run.finish("train", cfg.seed, _echo(cfg, "train") + _echo(mcfg, "model"), inputs)
    print(f"best epoch {res.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_annotate(args, rc: RunConfig) -> int:
    model = load_model(args.model)
    corpus = _read(args.corpus)
    labels, refs = {}, {}
    for start in range(0, len(corpus), 16):
        group = corpus.utterances[start:start + 16]
        for u, hyp in zip(group, annotate_batch(model, group)):
            labels[u.id], refs[u.id] = hyp, u.labels
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_annotations(args.out, labels, refs)
    print(f"annotated {len(labels)} utterances -> {args.out}")
    return EXIT_OK


def _write_report(run: RunDir, rows: list[ReportRow]) -> str:
    md, text = report(rows)
    run.path("reports", "report.md").write_text(md)
    run.path("reports", "report.csv").write_text(text)
    return md


def cmd_evaluate(args, rc: RunConfig) -> int:
    cfg = rc.build("eval")
    ref = read_annotations(args.ref, args.ref_key)
    hyp = read_annotations(args.hyp)
    ids = align(ref, hyp)
    counts = confusion([ref[i] for i in ids], [hyp[i] for i in ids])
    run = RunDir(args.out, rc)
    md = _write_report(run, [ReportRow(cfg.id, cfg.model, "-", "-", counts.scores())])
    run.finish("evaluate", None, _echo(cfg, "eval"), [args.ref, args.hyp])
    print(md, end="")
    return EXIT_OK


def cmd_kappa(args, rc: RunConfig) -> int:
    cfg = rc.build("eval")
    names = [Path(p).stem for p in args.annotations]
    if len(set(names)) != len(names):
        names = [f"{i}:{n}" for i, n in enumerate(names)]
    ann = {n: read_annotations(p) for n, p in zip(names, args.annotations)}
    run = RunDir(args.out, rc)
    text = kappa_csv(ann, at_least=cfg.at_least)
    run.path("reports", "kappa.csv").write_text(text)
    run.finish("kappa", None, _echo(cfg, "eval"), list(args.annotations))
    print(text, end="")
    return EXIT_OK


def cmd_absample(args, rc: RunConfig) -> int:
    if args.seed is not None:
        rc.set("eval.seed", args.seed)
    if args.n is not None:
        rc.set("eval.n", args.n)
    cfg = rc.build("eval")
    ids = sample_disagreements(read_annotations(args.ref, args.ref_key), read_annotations(args.hyp),
                               cfg.n, cfg.seed)
    text = "".join(i + "\n" for i in ids)
    if args.out:
        run = RunDir(args.out, rc)
        run.path("reports", "absample.txt").write_text(text)
        run.finish("absample", cfg.seed, _echo(cfg, "eval"), [args.ref, args.hyp])
    print(text, end="")
    return EXIT_OK


# model rows of the results grid: (id, encoder, pretrained, fixed)
DEFAULT_GRID = [
    ("1", "none", False, False),
    ("3", "cnn_char", False, False),
    ("4", "cnn_char", True, True),
    ("5", "cnn_char", True, False),
    ("6", "conformer_char", False, False),
    ("7", "conformer_char", True, True),
    ("8", "conformer_char", True, False),
    ("9", "ppg", True, True),
]


def _run_cell(payload):
    cell, train_set, dev_set, test_set, mcfg = payload
    torch.set_num_threads(1)
    res = train(train_set, dev_set, cell.config, mcfg)
    _, counts, _ = evaluate(res.model, test_set)
    cfg = cell.config
    audio = cfg.audio_encoder != "none"
    row = ReportRow(cell.id, MODEL_NAMES[cfg.audio_encoder],
                    ("yes" if cfg.pretrained else "no") if audio else "-",
                    ("yes" if cfg.fixed else "no") if audio else "-", counts.scores())
    return row, module_bytes(res.model), res.log_csv(), dataclasses.asdict(res.model.cfg)


def cmd_ablate(args, rc: RunConfig) -> int:
    base = _train_config(args, rc)
    src = Path(args.corpus_dir)
    train_set, dev_set, test_set = (_read(str(src / f"{n}.jsonl")) for n in ("train", "dev", "test"))
    mcfg = _model_cfg(train_set, rc, base.preset)
    wanted = args.cells.split(",") if args.cells else [c[0] for c in DEFAULT_GRID]
    known = {c[0]: c for c in DEFAULT_GRID}
    unknown = [w for w in wanted if w not in known]
    if unknown:
        raise ConfigError(f"unknown grid cells {unknown}; choose from {sorted(known)}")
    run = RunDir(args.out, rc)
    pcfg = rc.build("pretrain")
    ckpts = {}
    for cid in wanted:
        _, kind, pre, _ = known[cid]
        if pre and kind not in ckpts:
            path = run.path("checkpoints", f"pretrain_{kind}.ckpt")
            enc = new_encoder(mcfg, kind, pcfg.seed)
            hist = pretrain(enc, train_set, pcfg.replace(encoder=kind))
            path.write_bytes(module_bytes(enc))
            run.path("logs", f"pretrain_{kind}.csv").write_text(history_csv(hist))
            ckpts[kind] = str(path)
    grid = []
    for cid in wanted:
        _, kind, pre, fixed = known[cid]
        grid.append(GridCell(cid, base.replace(audio_encoder=kind, pretrained=pre, fixed=fixed,
                                               pretrained_path=ckpts.get(kind) if pre else None)))
    payloads = [(c, train_set, dev_set, test_set, mcfg) for c in grid]
    workers = min(_threads(), len(grid))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]
    for cell, (_, blob, log_text, _) in zip(grid, results):
        run.path("checkpoints", f"cell{cell.id}.ckpt").write_bytes(blob)
        run.path("logs", f"cell{cell.id}.csv").write_text(log_text)
    md = _write_report(run, [r[0] for r in results])
    inputs = [str(src / f"{n}.jsonl") for n in ("train", "dev", "test")]
    run.finish("ablate", base.seed, _echo(base, "train") + _echo(pcfg, "pretrain") + _echo(mcfg, "model"), inputs)
    print(md, end="")
    return EXIT_OK


def _rows_from_csv(path: str) -> list[ReportRow]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows:
        raise ConfigError(f"{path}: empty report")
    header, out = rows[0], []
    for line in rows[1:]:
        if len(line) != len(header):
            raise ConfigError(f"{path}: malformed row {line}")
        scores = {}
        for name, value in zip(header[4:], line[4:]):
            level, metric = name.split(" ")
            key = {"pre.": "precision", "rec.": "recall", "f1": "f1"}[metric]
            scores.setdefault(level, {"absent": False})[key] = float(value)
        out.append(ReportRow(line[0], line[1], line[2], line[3], scores))
    return out


def cmd_report(args, rc: RunConfig) -> int:
    rows = [r for p in args.inputs for r in _rows_from_csv(p)]
    run = RunDir(args.out, rc)
    md = _write_report(run, rows)
    run.finish("report", None, [], list(args.inputs))
    print(md, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prosody-annotator", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True, seed=True):
        sp.add_argument("--config", help="flat 'key = value' file with namespaced keys")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        sp.add_argument("--out", required=out_required, help="run directory")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        return sp

    common(sub.add_parser("gen", help="synthesize a corpus"))
    sp = common(sub.add_parser("pretrain", help="pre-train an audio encoder"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--encoder", choices=["ppg", "conformer_char", "cnn_char"])
    sp = common(sub.add_parser("train", help="train the annotator"))
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--encoder", choices=["none", "cnn_char", "conformer_char", "ppg"])
    sp.add_argument("--pretrained", help="pre-trained audio encoder checkpoint")
    sp = sub.add_parser("annotate", help="label a corpus with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="annotation JSONL")
    sp = common(sub.add_parser("evaluate", help="precision/recall/F1 report"), seed=False)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref-key", default="labels", help="field holding the reference labels")
    sp = common(sub.add_parser("kappa", help="pairwise Cohen and Fleiss kappa"), seed=False)
    sp.add_argument("--annotations", nargs="+", required=True)
    sp = common(sub.add_parser("absample", help="sample utterances where two annotations differ"),
                out_required=False)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref-key", default="labels")
    sp.add_argument("--n", type=int)
    sp = common(sub.add_parser("ablate", help="train and test the model grid"))
    sp.add_argument("--corpus-dir", required=True, help="directory with train/dev/test.jsonl")
    sp.add_argument("--cells", help="comma-separated grid ids (default: all)")
    sp = common(sub.add_parser("report", help="merge report CSVs into one grid"), seed=False)
    sp.add_argument("--inputs", nargs="+", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "annotate": cmd_annotate,
            "evaluate": cmd_evaluate, "kappa": cmd_kappa, "absample": cmd_absample, "ablate": cmd_ablate,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        torch.set_num_threads(_threads())
        rc = RunConfig.load(getattr(args, "config", None), getattr(args, "set", []))
        return COMMANDS[args.command](args, rc)
    except (ProsodyError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
