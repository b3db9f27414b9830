"""Experiment specs, runs and reports.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  List
values are comma separated.  Every key is optional and unknown keys are
rejected.  See ``CONFIG_KEYS`` for the schema and defaults.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import TaskSpec, build_client_datasets
from .federation import STRATEGIES, FederationConfig, RoundHistory, run_federation
from .model import ModelDims

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "FEDNANO_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {v}" for k, v in problems.items()))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "epoch") else int(text)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


_TASK, _DIMS, _FED, _EXP = "task", "dims", "federation", "experiment"
_task_defaults = TaskSpec()
_dims_defaults = ModelDims()
_fed_defaults = FederationConfig()

# key -> (section, parser, default)
CONFIG_KEYS: dict[str, tuple[str, object, object]] = {
    "n_categories": (_TASK, int, _task_defaults.n_categories),
    "n_skills": (_TASK, int, _task_defaults.n_skills),
    "n_samples": (_TASK, int, _task_defaults.n_samples),
    "d_img": (_TASK, int, _task_defaults.d_img),
    "vocab": (_TASK, int, _task_defaults.vocab),
    "seq_len": (_TASK, int, _task_defaults.seq_len),
    "n_answers": (_TASK, int, _task_defaults.n_answers),
    "noise_sigma": (_TASK, float, _task_defaults.noise_sigma),
    "label_noise": (_TASK, float, _task_defaults.label_noise),
    "d_emb": (_DIMS, int, _dims_defaults.d_emb),
    "d_model": (_DIMS, int, _dims_defaults.d_model),
    "d_hidden": (_DIMS, int, _dims_defaults.d_hidden),
    "n_clients": (_FED, int, _fed_defaults.n_clients),
    "rounds": (_FED, int, _fed_defaults.rounds),
    "local_steps": (_FED, _opt_int, _fed_defaults.local_steps),
    "batch_size": (_FED, int, _fed_defaults.batch_size),
    "rank": (_FED, int, _fed_defaults.rank),
    "lr": (_FED, float, _fed_defaults.lr),
    "momentum": (_FED, float, _fed_defaults.momentum),
    "mu": (_FED, float, _fed_defaults.mu),
    "alpha": (_FED, float, _fed_defaults.alpha),
    "enable_image": (_FED, _bool, _fed_defaults.enable_image),
    "enable_text": (_FED, _bool, _fed_defaults.enable_text),
    "eval_every": (_FED, int, _fed_defaults.eval_every),
    "fisher_eps": (_FED, float, _fed_defaults.fisher_eps),
    "strategy": (_EXP, _str_list, ["fednano"]),
    "seeds": (_EXP, _int_list, [0]),
    "split": (_EXP, _float_list, [0.8, 0.1, 0.1]),
    "output_dir": (_EXP, str, "runs"),
    "sweep_rank": (_EXP, _int_list, []),
    "sweep_rounds": (_EXP, _int_list, []),
    "total_steps": (_EXP, _opt_int, None),
}


@dataclass
class ExperimentSpec:
    task: TaskSpec = field(default_factory=TaskSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    strategies: list[str] = field(default_factory=lambda: ["fednano"])
    seeds: list[int] = field(default_factory=lambda: [0])
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    output_dir: Path = Path("runs")
    sweep_rank: list[int] = field(default_factory=list)
    sweep_rounds: list[int] = field(default_factory=list)
    total_steps: int | None = None

    def values(self) -> dict[str, object]:
        """Flat key -> value view matching ``CONFIG_KEYS``."""
        out: dict[str, object] = {}
        for key, (section, _, _) in CONFIG_KEYS.items():
            if section == _TASK:
                out[key] = getattr(self.task, key)
            elif section == _DIMS:
                out[key] = getattr(self.federation.dims, key)
            elif section == _FED:
                out[key] = getattr(self.federation, key)
        out.update(
            strategy=list(self.strategies),
            seeds=list(self.seeds),
            split=list(self.split),
            output_dir=str(self.output_dir),
            sweep_rank=list(self.sweep_rank),
            sweep_rounds=list(self.sweep_rounds),
            total_steps=self.total_steps,
        )
        return out

    def runs(self) -> list[tuple[str, int, str, FederationConfig]]:
        """Every (strategy, seed, sweep label, config) combination to execute."""
        variants: list[tuple[str, FederationConfig]] = []
        base = self.federation
        if self.sweep_rank:
            variants = [(f"rank={r}", replace(base, rank=r)) for r in self.sweep_rank]
        elif self.sweep_rounds:
            for r in self.sweep_rounds:
                steps = self.total_steps // r if self.total_steps else base.local_steps
                variants.append((f"rounds={r}", replace(base, rounds=r, local_steps=steps)))
        else:
            variants = [("", base)]
        out = []
        for strategy in self.strategies:
            for label, cfg in variants:
                for seed in self.seeds:
                    out.append((strategy, seed, label, replace(cfg, strategy=strategy, seed=seed)))
        return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_text(text: str, overrides: dict[str, str] | None = None, source: str = "<config>") -> ExperimentSpec:
    raw: dict[str, str] = {}
    problems: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems[f"line {lineno}"] = f"expected 'key = value' in {source}"
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key] = value
    raw.update(overrides or {})

    values = {k: d for k, (_, _, d) in CONFIG_KEYS.items()}
    for key, text_value in raw.items():
        if key not in CONFIG_KEYS:
            problems[key] = "unknown key"
            continue
        parser = CONFIG_KEYS[key][1]
        try:
            values[key] = parser(text_value)
        except ValueError as exc:
            problems[key] = f"cannot parse {text_value!r} ({exc})"
    if problems:
        raise ConfigError(problems)
    spec = build_spec(values)
    return spec


def build_spec(values: dict[str, object]) -> ExperimentSpec:
    problems: dict[str, str] = {}
    sections: dict[str, dict] = {_TASK: {}, _DIMS: {}, _FED: {}}
    for key, (section, _, _) in CONFIG_KEYS.items():
        if section in sections:
            sections[section][key] = values[key]

    task = TaskSpec(**sections[_TASK])
    dims = ModelDims(d_img=task.d_img, vocab=task.vocab, n_answers=task.n_answers, **sections[_DIMS])
    fed = FederationConfig(dims=dims, **sections[_FED])

    # per-key checks so errors name the offending key
    for key in ("n_categories", "n_skills", "n_samples", "d_img", "n_answers", "d_emb", "d_model", "d_hidden",
                "n_clients", "batch_size", "eval_every"):
        if values[key] < 1:
            problems[key] = "must be >= 1"
    if values["rounds"] < 0:
        problems["rounds"] = "must be >= 0"
    if values["local_steps"] is not None and values["local_steps"] < 1:
        problems["local_steps"] = "must be >= 1"
    if not values["alpha"] > 0:
        problems["alpha"] = "must be > 0"
    if not values["lr"] >= 0:
        problems["lr"] = "must be >= 0"
    if not 0 <= values["momentum"] < 1:
        problems["momentum"] = "must lie in [0, 1)"
    if values["mu"] < 0:
        problems["mu"] = "must be >= 0"
    if not values["fisher_eps"] > 0:
        problems["fisher_eps"] = "must be > 0"
    if values["noise_sigma"] < 0:
        problems["noise_sigma"] = "must be >= 0"
    if not 0 <= values["label_noise"] <= 1:
        problems["label_noise"] = "must lie in [0, 1]"
    ranks = values["sweep_rank"] or [values["rank"]]
    if any(not 1 <= r <= values["d_model"] for r in ranks):
        problems["sweep_rank" if values["sweep_rank"] else "rank"] = f"must lie in [1, d_model={values['d_model']}]"
    if not (values["enable_image"] or values["enable_text"]):
        problems["enable_image"] = "at least one adapter must be enabled"
    strategies = values["strategy"]
    if not strategies:
        problems["strategy"] = "at least one strategy required"
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        problems["strategy"] = f"unknown {bad}; choose from {list(STRATEGIES)}"
    if not values["seeds"]:
        problems["seeds"] = "at least one seed required"
    split = values["split"]
    if len(split) != 3 or any(r <= 0 for r in split) or not math.isclose(sum(split), 1.0, abs_tol=1e-9):
        problems["split"] = "three positive ratios summing to 1"
    if values["sweep_rank"] and values["sweep_rounds"]:
        problems["sweep_rounds"] = "only one sweep per experiment"
    if any(r < 1 for r in values["sweep_rounds"]):
        problems["sweep_rounds"] = "rounds must be >= 1"
    if values["total_steps"] is not None:
        if values["total_steps"] < 1:
            problems["total_steps"] = "must be >= 1"
        elif any(values["total_steps"] % r for r in values["sweep_rounds"]):
            problems["total_steps"] = "must be divisible by every sweep_rounds entry"
    if not problems:
        try:
            task.validate()
        except ValueError as exc:
            problems["task"] = str(exc)
    if problems:
        raise ConfigError(problems)
    return ExperimentSpec(
        task=task,
        federation=fed,
        strategies=list(strategies),
        seeds=list(values["seeds"]),
        split=tuple(split),
        output_dir=Path(values["output_dir"]),
        sweep_rank=list(values["sweep_rank"]),
        sweep_rounds=list(values["sweep_rounds"]),
        total_steps=values["total_steps"],
    )


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError({"path": f"no such config file: {path}"})
    return parse_text(path.read_text(encoding="utf-8"), overrides, source=str(path))


def emit_config(spec: ExperimentSpec) -> str:
    lines = [f"{key} = {_format(value)}" for key, value in spec.values().items()]
    return "\n".join(lines) + "\n"


def resolve_output_dir(spec: ExperimentSpec) -> Path:
    out = spec.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# -- running --------------------------------------------------------------------


def run_label(strategy: str, seed: int, sweep: str) -> str:
    label = f"{strategy}_seed{seed}"
    if sweep:
        label += "_" + sweep.replace("=", "")
    return label


def _fmt(x: float | None) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def history_csv(history: RoundHistory, strategy: str, seed: int, sweep: str) -> str:
    k = history.config.n_clients
    header = ["schema", "strategy", "seed", "sweep", "round"] + [f"acc_c{i + 1}" for i in range(k)] + [
        "avg_accuracy",
        "train_loss",
        "upload_params",
        "passes",
        "global_checksum",
    ]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in history.records:
        accs = rec.test_accuracy or [None] * k
        loss = sum(c.train_loss for c in rec.clients) / len(rec.clients)
        w.writerow(
            [CSV_SCHEMA_VERSION, strategy, seed, sweep, rec.round]
            + [_fmt(a) for a in accs]
            + [_fmt(rec.avg_accuracy), _fmt(loss), rec.upload_params, rec.passes, rec.global_checksum[:16]]
        )
    return buf.getvalue()


def run_experiment(spec: ExperimentSpec, out_dir: Path | None = None) -> Path:
    """Execute every (strategy, sweep, seed) run, write per-run CSVs and summaries.

    Returns the output directory.  If a run raises, a ``FAILED`` marker listing
    the finished runs is written before the exception propagates.
    """
    out = out_dir or resolve_output_dir(spec)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    (out / "config.txt").write_text(emit_config(spec), encoding="utf-8")
    dataset_cache: dict[int, list] = {}
    done: list[str] = []
    try:
        for strategy, seed, sweep, cfg in spec.runs():
            if seed not in dataset_cache:
                dataset_cache[seed] = build_client_datasets(
                    spec.task, cfg.n_clients, cfg.alpha, seed, tuple(spec.split)
                )
            history = run_federation(cfg, dataset_cache[seed])
            label = run_label(strategy, seed, sweep)
            (runs_dir / f"{label}.csv").write_text(history_csv(history, strategy, seed, sweep), encoding="utf-8")
            done.append(label)
            log.info("%s final avg accuracy %s", label, _fmt(history.final_accuracy))
    except Exception as exc:
        (out / "FAILED").write_text(
            f"error: {exc!r}\ncompleted runs:\n" + "".join(f"  {d}\n" for d in done), encoding="utf-8"
        )
        raise
    rows = load_histories(sorted(runs_dir.glob("*.csv")))
    (out / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    (out / "report.txt").write_text(emit_report(rows), encoding="utf-8")
    return out


# -- reporting -----------------------------------------------------------------


@dataclass
class FinalRow:
    strategy: str
    seed: int
    sweep: str
    client_acc: list[float]
    avg: float


def load_histories(paths: list[Path]) -> list[FinalRow]:
    """Final evaluated round of each per-run CSV."""
    if not paths:
        raise ValueError("no history files")
    rows = []
    for path in paths:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or "avg_accuracy" not in reader.fieldnames:
                    raise ValueError("missing header")
                acc_cols = [c for c in reader.fieldnames if c.startswith("acc_c")]
                final = None
                for r in reader:
                    if r["avg_accuracy"]:
                        final = r
                if final is None:
                    raise ValueError("no evaluated round")
                rows.append(
                    FinalRow(
                        strategy=final["strategy"],
                        seed=int(final["seed"]),
                        sweep=final["sweep"],
                        client_acc=[float(final[c]) if final[c] else math.nan for c in acc_cols],
                        avg=float(final["avg_accuracy"]),
                    )
                )
        except (OSError, ValueError, KeyError) as exc:
            raise ValueError(f"malformed history file {path}: {exc}") from exc
    return rows


def _group(rows: list[FinalRow]) -> dict[tuple[str, str], list[FinalRow]]:
    groups: dict[tuple[str, str], list[FinalRow]] = {}
    for r in rows:
        groups.setdefault((r.strategy, r.sweep), []).append(r)
    return groups


def summary_csv(rows: list[FinalRow]) -> str:
    groups = _group(rows)
    k = max(len(r.client_acc) for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema", "strategy", "sweep", "n_seeds"] + [f"c{i + 1}" for i in range(k)] + ["avg_mean", "avg_std", "avg_min", "avg_max"])
    for (strategy, sweep), grp in sorted(groups.items()):
        avgs = [g.avg for g in grp]
        clients = [statistics.fmean(g.client_acc[i] for g in grp) for i in range(k)]
        std = statistics.stdev(avgs) if len(avgs) > 1 else 0.0
        w.writerow(
            [CSV_SCHEMA_VERSION, strategy, sweep, len(grp)]
            + [_fmt(c) for c in clients]
            + [_fmt(statistics.fmean(avgs)), _fmt(std), _fmt(min(avgs)), _fmt(max(avgs))]
        )
    return buf.getvalue()


def emit_report(rows: list[FinalRow]) -> str:
    """Aligned table: one row per strategy (and sweep setting), columns C1..CK and Avg.

    Values are seed-averaged percentages at two decimals.  The best Avg is
    marked with ``*``; rows whose displayed Avg ties the best are all marked.
    """
    groups = _group(rows)
    k = max(len(r.client_acc) for r in rows)
    table = []
    for (strategy, sweep), grp in sorted(groups.items()):
        name = strategy if not sweep else f"{strategy} [{sweep}]"
        clients = [100 * statistics.fmean(g.client_acc[i] for g in grp) for i in range(k)]
        avg = 100 * statistics.fmean(g.avg for g in grp)
        table.append((name, [f"{c:.2f}" for c in clients], f"{avg:.2f}"))
    best = max(float(t[2]) for t in table)
    header = ["Approach"] + [f"C{i + 1}" for i in range(k)] + ["Avg"]
    body = [[name] + cells + [avg + ("*" if float(avg) == best else "")] for name, cells, avg in table]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for r in [header] + body:
        lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)))
        if r is header:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_dir(path: str | Path) -> str:
    path = Path(path)
    runs = path / "runs" if (path / "runs").is_dir() else path
    return emit_report(load_histories(sorted(runs.glob("*.csv"))))

