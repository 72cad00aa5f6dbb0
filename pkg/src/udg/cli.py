"""``udg <train|eval|score|ablate|gen-data> [--config PATH] [--key value]...``

Every ``--key value`` pair is either a command option or a training config
key (hyphens and underscores are interchangeable). Config-file values come
first and command-line pairs override them. A key given without a value is
read as ``true``.

Data arguments take a dataset file or a generator spec::

    moons:n=400,rotation=30,noise=0.1,seed=0
    glyphs:n=500,family=noise,severity=3,seed=0

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

from .bench import (
    DatasetFormatError,
    NonFiniteLossError,
    ShiftSpec,
    average_accuracy,
    evaluate,
    gen_glyphs,
    gen_two_moons,
    load_dataset,
    save_dataset,
)
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    model_to_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
    state_to_checkpoint,
)
from .config import ConfigError, TrainConfig, coerce, config_key_lines, format_config, parse_config_text
from .experiments import ABLATION_FAMILIES, ablation_table, mean_std
from .metrics import write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "eval", "score", "ablate", "gen-data")
CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}

# Command options and their types; "list" options may repeat.
OPTIONS = {
    "train": {"data": "str", "out": "str", "method": "str", "resume": "str", "hard_tau": "bool"},
    "eval": {"checkpoint": "str", "data": "list", "out": "str"},
    "score": {
        "checkpoint": "str",
        "source": "str",
        "target": "list",
        "oracle_bayes": "bool",
        "score_batch": "int",
        "out": "str",
    },
    "ablate": {"family": "str", "seeds": "int", "out": "str", "hard_tau": "bool"},
    "gen-data": {"spec": "str", "out": "str"},
}
TRAINS = {"train", "ablate"}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ arguments


def split_pairs(tokens: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"expected --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            value = tokens[i + 1]
            i += 2
        else:
            value = "true"
            i += 1
        pairs.append((key, value))
    return pairs


def parse_args(argv: list[str]) -> tuple[str, dict, dict]:
    """Return ``(command, options, config_values)``."""
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError(__doc__.strip())
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    opts_spec = OPTIONS[command]
    options: dict = {k: [] for k, t in opts_spec.items() if t == "list"}
    values: dict = {}
    origin: dict[str, str] = {}
    pairs = split_pairs(rest)
    for key, value in pairs:
        if key == "config":
            path = Path(value)
            if not path.is_file():
                raise ConfigError(f"config file not found: {value}")
            text = path.read_text(encoding="utf-8")
            for k, v in parse_config_text(text, str(path), opts_spec).items():
                (options if k in opts_spec else values)[k] = v
            origin.update({k: f"{path}:{n}" for k, n in config_key_lines(text).items()})
    for key, value in pairs:
        if key == "config":
            continue
        if key in opts_spec:
            kind = opts_spec[key]
            if kind == "list":
                options[key].append(value)
            else:
                options[key] = coerce(key, value, kind)
        elif key in CONFIG_KEYS and command in TRAINS:
            values[key] = coerce(key, value)
            origin[key] = "command line"
        else:
            raise ConfigError(f"unknown config key {key!r} for {command}")
    if options.pop("hard_tau", False):
        values["tau_mode"] = "hard"
    options["_origin"] = origin
    return command, options, values


def build_config(values: dict, origin: dict[str, str] | None = None) -> TrainConfig:
    """Validate the merged values; errors point at the line that set the key."""
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        where = (origin or {}).get(key)
        raise ConfigError(f"{where}: {exc}" if where else str(exc)) from None


# ----------------------------------------------------------------------- data


def parse_spec(spec: str):
    """``kind:key=value,...`` to ``(kind, params)``."""
    kind, _, body = spec.partition(":")
    params = {}
    for item in filter(None, (p.strip() for p in body.split(","))):
        if "=" not in item:
            raise UsageError(f"bad generator spec item {item!r} in {spec!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = v.strip()
    return kind, params


def generate(spec: str):
    kind, p = parse_spec(spec)
    try:
        if kind == "moons":
            rot = float(p.pop("rotation", 0))
            ds = gen_two_moons(int(p.pop("n", 400)), rot, float(p.pop("noise", 0.1)), int(p.pop("seed", 0)))
            ds.domain_id = f"moons_rot{rot:g}"
        elif kind == "glyphs":
            family = p.pop("family", None)
            shift = ShiftSpec(family, int(p.pop("severity", 1))) if family else None
            ds = gen_glyphs(int(p.pop("n", 500)), shift, int(p.pop("seed", 0)))
        else:
            raise UsageError(f"unknown generator {kind!r} (moons or glyphs)")
    except ValueError as exc:
        raise UsageError(f"bad generator spec {spec!r}: {exc}") from None
    if p:
        raise UsageError(f"unknown generator keys in {spec!r}: {', '.join(sorted(p))}")
    return ds


def is_spec(text: str) -> bool:
    return text.split(":", 1)[0] in ("moons", "glyphs") and ":" in text


def load_data(text: str):
    if is_spec(text):
        return generate(text)
    if not Path(text).is_file():
        raise UsageError(f"dataset not found: {text}")
    return load_dataset(text)


def require(options: dict, key: str):
    if not options.get(key):
        raise UsageError(f"missing --{key.replace('_', '-')}")
    return options[key]


def load_ckpt(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def emit(text: str, out: str | None) -> None:
    sys.stdout.write(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# ------------------------------------------------------------------- commands


def cmd_train(options: dict, values: dict) -> int:
    from .bench import erm_train, init_model
    from .meta import new_state, train

    cfg = build_config(values, options.get("_origin"))
    source = load_data(options.get("data", "moons:n=400,rotation=0,noise=0.1,seed=0"))
    method = options.get("method", "udg")
    if method not in ("udg", "erm"):
        raise UsageError(f"--method must be udg or erm, got {method!r}")
    out = Path(options.get("out", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg.to_dict()), encoding="utf-8")

    if method == "erm":
        model = init_model(cfg, source)
        backbone, history = erm_train(cfg, source, model)
        model.backbone = backbone
        ckpt = model_to_checkpoint(model, cfg, cfg.iterations, kind="erm")
    else:
        if options.get("resume"):
            state = state_from_checkpoint(load_ckpt(options["resume"]))
            state.config = cfg
        else:
            state = new_state(cfg, source)
        state, history = train(cfg, source, state, checkpoint_dir=out)
        backbone = state.model.backbone
        ckpt = state_to_checkpoint(state)
    save_checkpoint(out / "checkpoint.json", ckpt)
    write_metrics_csv(out / "metrics.csv", history)
    loss = history[-1].loss_train if history else float("nan")
    print(f"iter={ckpt.iteration} loss={loss:.6f} src_acc={evaluate(backbone, source).accuracy:.4f}")
    return EXIT_OK


def cmd_eval(options: dict, values: dict) -> int:
    model = model_from_checkpoint(load_ckpt(require(options, "checkpoint")))
    data = require(options, "data")
    records = [evaluate(model.backbone, load_data(d)) for d in data]
    lines = ["domain_id,family,severity,n,correct,accuracy"]
    for r in records:
        fam, sev = (r.shift.family, r.shift.severity) if r.shift else ("", "")
        lines.append(f"{r.domain_id},{fam},{sev},{r.n},{r.correct},{r.accuracy:.6f}")
    lines.append(f"avg,,,{sum(r.n for r in records)},{sum(r.correct for r in records)},{average_accuracy(records):.6f}")
    emit("\n".join(lines) + "\n", options.get("out"))
    return EXIT_OK


def cmd_score(options: dict, values: dict) -> int:
    from .uncertainty import score_domains

    model = model_from_checkpoint(load_ckpt(require(options, "checkpoint")))
    source = load_data(require(options, "source"))
    targets = [load_data(t) for t in require(options, "target")]
    width = model.backbone.sizes[0]
    for ds in (source, *targets):
        if ds.dim != width:
            raise UsageError(f"{ds.domain_id}: {ds.dim} input columns, the model expects {width}")
    try:
        report = score_domains(
            model.pnet,
            model.backbone,
            source,
            targets,
            batch_size=options.get("score_batch"),
            oracle_bayes=options.get("oracle_bayes", False),
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    emit(report.to_json() + "\n", options.get("out"))
    return EXIT_OK


def cmd_ablate(options: dict, values: dict) -> int:
    family = require(options, "family")
    if family not in ABLATION_FAMILIES:
        raise UsageError(f"unknown ablation family {family!r} (choose from {', '.join(ABLATION_FAMILIES)})")
    seeds = options.get("seeds", 5)
    if seeds < 1:
        raise UsageError("--seeds must be >= 1")
    rows = ablation_table(build_config(values, options.get("_origin")), family, seeds)
    lines = ["variant,mean,std," + ",".join(f"seed{s}" for s in range(seeds))]
    for name, accs in rows.items():
        m, s = mean_std(accs)
        lines.append(f"{name},{m:.4f},{s:.4f}," + ",".join(f"{a:.4f}" for a in accs))
    emit("\n".join(lines) + "\n", options.get("out"))
    return EXIT_OK


def cmd_gen_data(options: dict, values: dict) -> int:
    ds = generate(require(options, "spec"))
    out = Path(require(options, "out"))
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(out, ds)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from None
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "score": cmd_score, "ablate": cmd_ablate, "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, options, values = parse_args(argv)
        return HANDLERS[command](options, values)
    except (UsageError, ConfigError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.report is not None:
            r = exc.report
            print(f"  loss_train={r.loss_train} loss_meta_test={r.loss_meta_test} kl={r.kl} mean_sigma={r.mean_sigma}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
